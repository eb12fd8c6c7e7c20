//! Run configuration: one TOML file with a section per concern.

use std::path::{Path, PathBuf};

use bda_core::backtest::BaselineConfig;
use bda_core::exchange::CostSchedule;
use bda_core::policy::{Head, PolicyConfig};
use bda_core::trainer::{Objective, TrainConfig};
use chrono::NaiveDate;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub grid: GridSection,
    pub costs: CostsSection,
    pub train: TrainConfig,
    pub policy: PolicySection,
    pub ablation: AblationSection,
    pub windows: WindowSection,
    pub baselines: BaselineConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format `date,ticker,adj_close` file.
    pub prices: PathBuf,
    /// One ticker per line.
    pub tickers: PathBuf,
    /// Aligned panel written by `ingest`, read by `train` and `backtest`.
    pub cache: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            prices: "data/prices.csv".into(),
            tickers: "data/djia_tickers.txt".into(),
            cache: "runs/panel.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Periods of history in the state.
    pub window: usize,
    pub days_per_period: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            window: 50,
            days_per_period: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostsSection {
    pub commission_rate: f64,
    pub cash_lending_rate_annual: f64,
    pub stock_lending_rate_annual: f64,
    pub days_per_year: f64,
}

impl Default for CostsSection {
    fn default() -> Self {
        Self {
            commission_rate: 0.0005,
            cash_lending_rate_annual: 0.03,
            stock_lending_rate_annual: 0.03,
            days_per_year: 252.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub depth: usize,
    pub head_hidden: usize,
    pub attn_scale: f64,
    /// Encoder MLP width as a multiple of the number of assets.
    pub mlp_ratio: usize,
    pub tau: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            depth: 6,
            head_hidden: 3712,
            attn_scale: 1.0,
            mlp_ratio: 4,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub positional_encoding: bool,
    pub softmax_head: bool,
    pub maximize_rho: bool,
    pub one_day_period: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    PositionalEncoding,
    SoftmaxHead,
    MaximizeRho,
    OneDayPeriod,
}

impl AblationSection {
    pub fn enable(&mut self, a: Ablation) {
        match a {
            Ablation::PositionalEncoding => self.positional_encoding = true,
            Ablation::SoftmaxHead => self.softmax_head = true,
            Ablation::MaximizeRho => self.maximize_rho = true,
            Ablation::OneDayPeriod => self.one_day_period = true,
        }
    }

    /// `BDA`, or `BDA-V1`, `BDA-V3+V4` and so on.
    pub fn variant(&self) -> String {
        let tags: Vec<&str> = [
            (self.positional_encoding, "V1"),
            (self.maximize_rho, "V3"),
            (self.softmax_head, "V4"),
            (self.one_day_period, "V5"),
        ]
        .into_iter()
        .filter_map(|(on, t)| on.then_some(t))
        .collect();
        if tags.is_empty() {
            "BDA".into()
        } else {
            format!("BDA-{}", tags.join("+"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub backtest_start: NaiveDate,
    pub backtest_days: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        let d = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).expect("valid date");
        Self {
            train_start: d(2018, 1, 1),
            train_end: d(2020, 12, 31),
            backtest_start: d(2021, 1, 1),
            backtest_days: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::input(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let w = &self.windows;
        if w.train_start > w.train_end {
            return Err(CliError::input("train_start is after train_end"));
        }
        if w.train_end >= w.backtest_start {
            return Err(CliError::input("training window must end before the backtest starts"));
        }
        if self.grid.window == 0 || self.grid.days_per_period == 0 {
            return Err(CliError::input("window and days_per_period must be positive"));
        }
        self.train.validate().map_err(|e| CliError::input(e.to_string()))?;
        self.costs_schedule()?;
        Ok(())
    }

    pub fn days_per_period(&self) -> usize {
        if self.ablation.one_day_period {
            1
        } else {
            self.grid.days_per_period
        }
    }

    pub fn costs_schedule(&self) -> Result<CostSchedule, CliError> {
        let c = &self.costs;
        let mut s = CostSchedule::new(
            c.commission_rate,
            c.cash_lending_rate_annual,
            c.stock_lending_rate_annual,
            self.days_per_period(),
        )
        .map_err(|e| CliError::input(e.to_string()))?;
        s.days_per_year = c.days_per_year;
        s.validate().map_err(|e| CliError::input(e.to_string()))?;
        Ok(s)
    }

    pub fn policy_config(&self, n_assets: usize) -> PolicyConfig {
        let mut p = PolicyConfig::new(n_assets, self.grid.window * self.days_per_period());
        let t = &mut p.transformer;
        t.depth = self.policy.depth;
        t.head_hidden = self.policy.head_hidden;
        t.attn_scale = self.policy.attn_scale;
        t.mlp_hidden = self.policy.mlp_ratio * n_assets;
        t.positional_encoding = self.ablation.positional_encoding;
        p.tau = self.policy.tau;
        if self.ablation.softmax_head {
            p.head = Head::Softmax;
        }
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.ablation.maximize_rho {
            t.objective = Objective::MaximizeRho;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.grad_clip = f64::INFINITY;
        cfg.train.total_steps = 256;
        cfg.ablation.softmax_head = true;
        cfg.policy.depth = 2;
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(RunConfig::parse(&again.to_toml()).unwrap(), again);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("[train]\nminibatch = 64\n\n[grid]\nwindow = 10\n").unwrap();
        assert_eq!(cfg.train.minibatch, 64);
        assert_eq!(cfg.train.target_step, 1080);
        assert_eq!(cfg.grid.window, 10);
        assert_eq!(cfg.grid.days_per_period, 5);
        assert_eq!(cfg.policy.head_hidden, 3712);
    }

    #[test]
    fn rejects_unknown_keys_and_overlap() {
        assert!(RunConfig::parse("[train]\nlearning_rat = 1.0\n").is_err());
        let overlap = "[windows]\ntrain_end = \"2021-02-01\"\n";
        assert!(RunConfig::parse(overlap).is_err());
    }

    #[test]
    fn variant_labels() {
        let mut a = AblationSection::default();
        assert_eq!(a.variant(), "BDA");
        a.enable(Ablation::SoftmaxHead);
        assert_eq!(a.variant(), "BDA-V4");
        a.enable(Ablation::PositionalEncoding);
        assert_eq!(a.variant(), "BDA-V1+V4");
    }

    #[test]
    fn one_day_ablation_shortens_periods() {
        let mut cfg = RunConfig::default();
        cfg.ablation.one_day_period = true;
        assert_eq!(cfg.costs_schedule().unwrap().period_days, 1);
        assert_eq!(cfg.policy_config(29).history_rows, 50);
        assert_eq!(RunConfig::default().policy_config(29).history_rows, 250);
    }
}
