//! Out-of-sample evaluation: strategies run through the exchange on held-out
//! periods, daily log2 growth of total assets, and the risk-adjusted metric
//! suite. Ships a set of classical comparison strategies.

use std::io::Write;

use gradnet::ParamStore;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use thiserror::Error;

use crate::blmodel::{self, BlError};
use crate::env::MarketEnv;
use crate::exchange::{step_period, target_quantity, ExchangeError, Fill, Ledger};
use crate::marketdata::AgentState;
use crate::policy::{Policy, PolicyError};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("metric suite needs at least one daily return")]
    EmptySeries,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Bl(#[from] BlError),
    #[error("strategy {name} emitted invalid weights in period {period}: {reason}")]
    InvalidWeights {
        name: String,
        period: usize,
        reason: String,
    },
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot write report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Std was zero; SR reported as 0.
    SrDegenerate,
    /// LStd was zero; STR reported as 0.
    StrDegenerate,
    /// Total assets hit zero; the series is truncated.
    Bankrupt,
    /// A period lost more than the investment amount; the series is truncated.
    LossExceedsInvestment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AR")]
    pub ar: f64,
    #[serde(rename = "DR")]
    pub dr: f64,
    #[serde(rename = "Std")]
    pub std: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "LStd")]
    pub lstd: f64,
    #[serde(rename = "STR")]
    pub str_: f64,
}

/// AR, DR, population Std, SR, downside deviation below zero and the
/// Sortino ratio, with a zero risk-free rate.
pub fn metric_suite(series: &[f64]) -> Result<(Metrics, Vec<Flag>), BacktestError> {
    if series.is_empty() {
        return Err(BacktestError::EmptySeries);
    }
    let len = series.len() as f64;
    let ar: f64 = series.iter().sum();
    let dr = ar / len;
    let std = (series.iter().map(|x| (x - dr) * (x - dr)).sum::<f64>() / len).sqrt();
    // a constant series leaves only rounding noise behind
    let scale = series.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let std = if std <= 4.0 * f64::EPSILON * scale { 0.0 } else { std };
    let lstd = (series.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>() / len).sqrt();
    let mut flags = Vec::new();
    let sr = if std > 0.0 {
        dr / std
    } else {
        flags.push(Flag::SrDegenerate);
        0.0
    };
    let str_ = if lstd > 0.0 {
        dr / lstd
    } else {
        flags.push(Flag::StrDegenerate);
        0.0
    };
    Ok((
        Metrics {
            ar,
            dr,
            std,
            sr,
            lstd,
            str_,
        },
        flags,
    ))
}

/// A decision rule from states to weights of the investment amount.
pub trait Strategy: Send {
    fn name(&self) -> &str;

    /// Long-only rules must stay on the simplex (non-negative, sum ≤ 1).
    fn long_only(&self) -> bool;

    /// Called once before the first period.
    fn reset(&mut self, n_assets: usize, days_per_period: usize);

    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub flags: Vec<Flag>,
    #[serde(skip)]
    pub daily_returns: Vec<f64>,
    #[serde(skip)]
    pub weights: Vec<Vec<f64>>,
    #[serde(skip)]
    pub periods: Vec<usize>,
    #[serde(skip)]
    pub fills: Vec<(usize, Vec<Fill>)>,
    #[serde(skip)]
    pub final_value: f64,
}

impl MetricReport {
    pub fn truncated(&self) -> bool {
        self.flags
            .iter()
            .any(|f| matches!(f, Flag::Bankrupt | Flag::LossExceedsInvestment))
    }

    /// `{name, AR, DR, Std, SR, LStd, STR, flags}`.
    pub fn write_json<W: Write>(&self, out: W) -> Result<(), BacktestError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// `day,theta`, days counted from 1.
    pub fn write_series_csv<W: Write>(&self, out: W) -> Result<(), BacktestError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "theta"])?;
        for (i, v) in self.daily_returns.iter().enumerate() {
            w.write_record([(i + 1).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `period,<ticker>...`, one row per decision.
    pub fn write_weights_csv<W: Write>(&self, out: W, tickers: &[String]) -> Result<(), BacktestError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["period".to_string()];
        header.extend(tickers.iter().cloned());
        w.write_record(&header)?;
        for (p, ws) in self.periods.iter().zip(&self.weights) {
            let mut row = vec![p.to_string()];
            row.extend(ws.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranking table sorted by AR, best first.
pub fn write_summary_csv<W: Write>(out: W, reports: &[(String, Metrics)]) -> Result<(), BacktestError> {
    let mut rows: Vec<&(String, Metrics)> = reports.iter().collect();
    rows.sort_by(|a, b| b.1.ar.total_cmp(&a.1.ar).then_with(|| a.0.cmp(&b.0)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "AR", "DR", "Std", "SR", "LStd", "STR"])?;
    for (name, m) in rows {
        w.write_record([
            name.clone(),
            m.ar.to_string(),
            m.dr.to_string(),
            m.std.to_string(),
            m.sr.to_string(),
            m.lstd.to_string(),
            m.str_.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_weights(strategy: &dyn Strategy, period: usize, w: &[f64], n: usize) -> Result<(), BacktestError> {
    let fail = |reason: String| {
        Err(BacktestError::InvalidWeights {
            name: strategy.name().to_string(),
            period,
            reason,
        })
    };
    if w.len() != n {
        return fail(format!("{} weights for {n} assets", w.len()));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return fail("non-finite weight".into());
    }
    if strategy.long_only() {
        let s: f64 = w.iter().sum();
        if w.iter().any(|&x| x < 0.0) || s > 1.0 + 1e-12 {
            return fail(format!("off the simplex (sum {s})"));
        }
    }
    Ok(())
}

/// Runs `strategy` over every decision period of `env`, starting from an
/// all-cash ledger worth `initial_amount`.
pub fn run_backtest(
    strategy: &mut dyn Strategy,
    env: &MarketEnv,
    initial_amount: f64,
) -> Result<MetricReport, BacktestError> {
    let n = env.n_assets();
    strategy.reset(n, env.grid().days_per_period());
    let mut ledger = Ledger::new(initial_amount, n);
    let mut prev = vec![0.0; n];
    let (mut series, mut weights, mut periods, mut fills) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut halt = None;

    for t in env.decision_periods() {
        let w = strategy.decide(&env.state(t, &prev))?;
        check_weights(strategy, t, &w, n)?;
        let exec = env.exec_prices(t);
        let q = target_quantity(&w, ledger.invest_amount, &exec);
        let start = ledger.mark(&exec);
        weights.push(w.clone());
        periods.push(t);
        let values = match step_period(&mut ledger, &q, &exec, &env.period_prices(t), env.costs()) {
            Ok(out) => {
                fills.push((t, out.fills));
                out.daily_values
            }
            Err(ExchangeError::Bankrupt { daily_values, .. }) => {
                halt = Some(Flag::Bankrupt);
                daily_values
            }
            Err(ExchangeError::LossExceedsInvestment { .. }) => {
                halt = Some(Flag::LossExceedsInvestment);
                let p = env.period_prices(t);
                (0..p.nrows())
                    .map(|d| ledger.mark(&p.row(d).iter().copied().collect::<Vec<_>>()))
                    .collect()
            }
            Err(e) => return Err(e.into()),
        };
        let mut last = start;
        for v in values {
            if !(v > 0.0) {
                break;
            }
            series.push((v / last).log2());
            last = v;
        }
        if halt.is_some() {
            break;
        }
        prev = w;
    }

    let (metrics, mut flags) = metric_suite(&series)?;
    flags.extend(halt);
    Ok(MetricReport {
        name: strategy.name().to_string(),
        metrics,
        flags,
        daily_returns: series,
        weights,
        periods,
        fills,
        final_value: ledger.total_value,
    })
}

/// Runs each strategy in its own ledger, in parallel; output order follows
/// the input order.
pub fn run_all(
    strategies: Vec<Box<dyn Strategy>>,
    env: &MarketEnv,
    initial_amount: f64,
) -> Vec<Result<MetricReport, BacktestError>> {
    strategies
        .into_par_iter()
        .map(|mut s| run_backtest(s.as_mut(), env, initial_amount))
        .collect()
}

/// Hyperparameters of the comparison strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub eg_eta: f64,
    pub olmar_window: usize,
    pub olmar_eps: f64,
    pub pamr_eps: f64,
    pub ons_beta: f64,
    pub ons_delta: f64,
    pub ons_eta: f64,
    /// Risk aversion of the two mean-variance rules.
    pub mv_gamma: f64,
    /// Cap on Σ|w| for the mean-variance rules.
    pub mv_gross_cap: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            eg_eta: 0.05,
            olmar_window: 5,
            olmar_eps: 10.0,
            pamr_eps: 0.5,
            ons_beta: 1.0,
            ons_delta: 0.125,
            ons_eta: 0.0,
            mv_gamma: 3.0,
            mv_gross_cap: 1.0,
        }
    }
}

pub fn baselines(cfg: &BaselineConfig) -> Vec<Box<dyn Strategy>> {
    vec![
        Box::new(Ubah::default()),
        Box::new(Crp),
        Box::new(Eg::new(cfg.eg_eta)),
        Box::new(Olmar::new(cfg.olmar_window, cfg.olmar_eps)),
        Box::new(Pamr::new(cfg.pamr_eps)),
        Box::new(Ons::new(cfg.ons_beta, cfg.ons_delta, cfg.ons_eta)),
        Box::new(JorionBayesStein::new(cfg.mv_gamma, cfg.mv_gross_cap)),
        Box::new(KanZhou::new(cfg.mv_gamma, cfg.mv_gross_cap)),
    ]
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Gross growth of each asset over the last `periods` periods of the
/// history.
fn price_relatives(state: &AgentState, days_per_period: usize, periods: usize) -> Vec<f64> {
    let h = &state.history;
    let rows = (days_per_period * periods).min(h.nrows());
    (0..h.ncols())
        .map(|i| 2f64.powf((h.nrows() - rows..h.nrows()).map(|d| h[(d, i)]).sum::<f64>()))
        .collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Buy equal weights once, then let them drift with prices.
#[derive(Debug, Default)]
pub struct Ubah {
    b: Option<Vec<f64>>,
    k: usize,
}

impl Strategy for Ubah {
    fn name(&self) -> &str {
        "UBAH"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, _n: usize, k: usize) {
        self.b = None;
        self.k = k;
    }
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let b = match self.b.take() {
            None => uniform(state.n_assets()),
            Some(b) => {
                let x = price_relatives(state, self.k, 1);
                let s = dot(&b, &x);
                b.iter().zip(&x).map(|(b, x)| b * x / s).collect()
            }
        };
        self.b = Some(b.clone());
        Ok(b)
    }
}

/// Rebalance to equal weights every period.
#[derive(Debug, Default)]
pub struct Crp;

impl Strategy for Crp {
    fn name(&self) -> &str {
        "CRP"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, _n: usize, _k: usize) {}
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        Ok(uniform(state.n_assets()))
    }
}

/// Exponentiated gradient: b ∝ b·exp(η x / bᵀx).
#[derive(Debug)]
pub struct Eg {
    eta: f64,
    b: Option<Vec<f64>>,
    k: usize,
}

impl Eg {
    pub fn new(eta: f64) -> Self {
        Self { eta, b: None, k: 1 }
    }
}

impl Strategy for Eg {
    fn name(&self) -> &str {
        "EG"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, _n: usize, k: usize) {
        self.b = None;
        self.k = k;
    }
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let b = match self.b.take() {
            None => uniform(state.n_assets()),
            Some(b) => {
                let x = price_relatives(state, self.k, 1);
                let s = dot(&b, &x);
                let raw: Vec<f64> = b.iter().zip(&x).map(|(b, x)| b * (self.eta * x / s).exp()).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            }
        };
        self.b = Some(b.clone());
        Ok(b)
    }
}

/// On-line moving average reversion.
#[derive(Debug)]
pub struct Olmar {
    window: usize,
    eps: f64,
    b: Option<Vec<f64>>,
    k: usize,
}

impl Olmar {
    pub fn new(window: usize, eps: f64) -> Self {
        Self {
            window: window.max(1),
            eps,
            b: None,
            k: 1,
        }
    }
}

impl Strategy for Olmar {
    fn name(&self) -> &str {
        "OLMAR"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, _n: usize, k: usize) {
        self.b = None;
        self.k = k;
    }
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let n = state.n_assets();
        let b = match self.b.take() {
            None => uniform(n),
            Some(b) => {
                let h = &state.history;
                let avail = h.nrows() / self.k;
                let w = self.window.min(avail);
                // predicted relative: mean over i < w of p_{t-i} / p_t
                let mut pred = vec![0.0; n];
                for (i, p) in pred.iter_mut().enumerate() {
                    let mut back = 0.0;
                    let mut acc = 1.0;
                    for lag in 1..w {
                        let rows = h.nrows() - lag * self.k..h.nrows() - (lag - 1) * self.k;
                        back += rows.map(|d| h[(d, i)]).sum::<f64>();
                        acc += 2f64.powf(-back);
                    }
                    *p = acc / w as f64;
                }
                let mbar = pred.iter().sum::<f64>() / n as f64;
                let dev: Vec<f64> = pred.iter().map(|x| x - mbar).collect();
                let nrm: f64 = dev.iter().map(|d| d * d).sum();
                let lam = if nrm > 0.0 {
                    ((self.eps - dot(&b, &pred)) / nrm).max(0.0)
                } else {
                    0.0
                };
                project_simplex(&b.iter().zip(&dev).map(|(b, d)| b + lam * d).collect::<Vec<_>>())
            }
        };
        self.b = Some(b.clone());
        Ok(b)
    }
}

/// Passive-aggressive mean reversion.
#[derive(Debug)]
pub struct Pamr {
    eps: f64,
    b: Option<Vec<f64>>,
    k: usize,
}

impl Pamr {
    pub fn new(eps: f64) -> Self {
        Self { eps, b: None, k: 1 }
    }
}

impl Strategy for Pamr {
    fn name(&self) -> &str {
        "PAMR"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, _n: usize, k: usize) {
        self.b = None;
        self.k = k;
    }
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let n = state.n_assets();
        let b = match self.b.take() {
            None => uniform(n),
            Some(b) => {
                let x = price_relatives(state, self.k, 1);
                let xbar = x.iter().sum::<f64>() / n as f64;
                let dev: Vec<f64> = x.iter().map(|v| v - xbar).collect();
                let nrm: f64 = dev.iter().map(|d| d * d).sum();
                let loss = (dot(&b, &x) - self.eps).max(0.0);
                let tau = if nrm > 0.0 { loss / nrm } else { 0.0 };
                project_simplex(&b.iter().zip(&dev).map(|(b, d)| b - tau * d).collect::<Vec<_>>())
            }
        };
        self.b = Some(b.clone());
        Ok(b)
    }
}

/// Online Newton step on the simplex.
#[derive(Debug)]
pub struct Ons {
    beta: f64,
    delta: f64,
    eta: f64,
    a: DMatrix<f64>,
    grad_sum: DVector<f64>,
    b: Option<Vec<f64>>,
    k: usize,
}

impl Ons {
    pub fn new(beta: f64, delta: f64, eta: f64) -> Self {
        Self {
            beta,
            delta,
            eta,
            a: DMatrix::zeros(0, 0),
            grad_sum: DVector::zeros(0),
            b: None,
            k: 1,
        }
    }
}

/// argmin over the simplex of (y − q)ᵀA(y − q), by projected gradient.
fn project_simplex_metric(q: &DVector<f64>, a: &DMatrix<f64>) -> Vec<f64> {
    let n = q.len();
    let lip = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut y = project_simplex(q.as_slice());
    for _ in 0..2000 {
        let yv = DVector::from_column_slice(&y);
        let g = a * (&yv - q) * 2.0;
        let step: Vec<f64> = y.iter().zip(g.iter()).map(|(y, g)| y - g / (2.0 * lip)).collect();
        let next = project_simplex(&step);
        let moved: f64 = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        y = next;
        if moved < 1e-13 {
            break;
        }
    }
    y
}

impl Strategy for Ons {
    fn name(&self) -> &str {
        "ONS"
    }
    fn long_only(&self) -> bool {
        true
    }
    fn reset(&mut self, n: usize, k: usize) {
        self.a = DMatrix::identity(n, n);
        self.grad_sum = DVector::zeros(n);
        self.b = None;
        self.k = k;
    }
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let n = state.n_assets();
        let b = match self.b.take() {
            None => uniform(n),
            Some(b) => {
                let x = price_relatives(state, self.k, 1);
                let s = dot(&b, &x);
                let grad = DVector::from_iterator(n, x.iter().map(|v| v / s));
                self.a += &grad * grad.transpose();
                self.grad_sum += &grad * (1.0 + 1.0 / self.beta);
                let q = blmodel::spd_solve(&self.a, &self.grad_sum)? * self.delta;
                let p = project_simplex_metric(&q, &self.a);
                p.iter().map(|v| (1.0 - self.eta) * v + self.eta / n as f64).collect()
            }
        };
        self.b = Some(b.clone());
        Ok(b)
    }
}

/// Simple daily returns of the history with their mean and the
/// divisor-`T` covariance.
fn simple_moments(state: &AgentState) -> (usize, DVector<f64>, DMatrix<f64>) {
    let r = state.history.map(|z| 2f64.powf(z) - 1.0);
    let t = r.nrows();
    let mean = r.row_mean().transpose();
    let mut c = r.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.transpose() * &c / t as f64;
    (t, mean, cov)
}

fn cap_gross(mut w: Vec<f64>, cap: f64) -> Vec<f64> {
    let gross: f64 = w.iter().map(|v| v.abs()).sum();
    if gross > cap {
        w.iter_mut().for_each(|v| *v *= cap / gross);
    }
    w
}

/// Mean-variance on the Bayes-Stein shrunk mean.
#[derive(Debug)]
pub struct JorionBayesStein {
    gamma: f64,
    cap: f64,
}

impl JorionBayesStein {
    pub fn new(gamma: f64, cap: f64) -> Self {
        Self { gamma, cap }
    }
}

impl Strategy for JorionBayesStein {
    fn name(&self) -> &str {
        "JB"
    }
    fn long_only(&self) -> bool {
        false
    }
    fn reset(&mut self, _n: usize, _k: usize) {}
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let n = state.n_assets();
        let (t, mu, mle) = simple_moments(state);
        if t <= n + 2 {
            return Ok(vec![0.0; n]);
        }
        let (tf, nf) = (t as f64, n as f64);
        let mut sigma = mle * (tf / (tf - nf - 2.0));
        blmodel::add_ridge(&mut sigma);
        let ones = DVector::from_element(n, 1.0);
        let chol = blmodel::spd_factor(&sigma)?;
        let si_one = chol.solve(&ones);
        let one_si_one = ones.dot(&si_one);
        let mu_g = mu.dot(&si_one) / one_si_one;
        let d = &mu - &ones * mu_g;
        let dsd = d.dot(&chol.solve(&d));
        // shrinkage intensity and the extra estimation-risk term
        let (phi, extra) = if dsd > 0.0 {
            let lam = (nf + 2.0) / dsd;
            (lam / (lam + tf), (1.0 + 1.0 / (tf + lam), lam / (tf * (tf + 1.0 + lam))))
        } else {
            (1.0, (1.0, 1.0 / tf))
        };
        let mu_bs = &mu * (1.0 - phi) + &ones * (phi * mu_g);
        let sigma_bs = &sigma * extra.0 + (&ones * ones.transpose()) * (extra.1 / one_si_one);
        let w = blmodel::spd_solve(&sigma_bs, &mu_bs)? / self.gamma;
        Ok(cap_gross(w.iter().copied().collect(), self.cap))
    }
}

/// Three-fund rule mixing the sample tangency and minimum-variance
/// portfolios.
#[derive(Debug)]
pub struct KanZhou {
    gamma: f64,
    cap: f64,
}

impl KanZhou {
    pub fn new(gamma: f64, cap: f64) -> Self {
        Self { gamma, cap }
    }
}

/// Bias-adjusted estimate of the squared Sharpe ratio of the tangency
/// portfolio in excess of the minimum-variance portfolio.
pub fn kan_zhou_psi2(psi2: f64, t: usize, n: usize) -> f64 {
    let (tf, nf) = (t as f64, n as f64);
    let base = ((tf - nf - 1.0) * psi2 - (nf - 1.0)) / tf;
    if !(psi2 > 0.0) || n < 2 {
        return base.max(0.0);
    }
    let (a, b) = ((nf - 1.0) / 2.0, (tf - nf + 1.0) / 2.0);
    let x = psi2 / (1.0 + psi2);
    let reg = beta_reg(a, b, x);
    if !(reg > 0.0) {
        return base.max(0.0);
    }
    let ln_term = 2f64.ln() + a * psi2.ln() - ((tf - 2.0) / 2.0) * psi2.ln_1p() - tf.ln() - reg.ln() - ln_beta(a, b);
    base + ln_term.exp()
}

impl Strategy for KanZhou {
    fn name(&self) -> &str {
        "KZTF"
    }
    fn long_only(&self) -> bool {
        false
    }
    fn reset(&mut self, _n: usize, _k: usize) {}
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        let n = state.n_assets();
        let (t, mu, mut sigma) = simple_moments(state);
        if t <= n + 4 {
            return Ok(vec![0.0; n]);
        }
        blmodel::add_ridge(&mut sigma);
        let (tf, nf) = (t as f64, n as f64);
        let ones = DVector::from_element(n, 1.0);
        let chol = blmodel::spd_factor(&sigma)?;
        let si_mu = chol.solve(&mu);
        let si_one = chol.solve(&ones);
        let mu_g = mu.dot(&si_one) / ones.dot(&si_one);
        let d = &mu - &ones * mu_g;
        let psi2 = d.dot(&chol.solve(&d));
        let eta = kan_zhou_psi2(psi2, t, n);
        let c3 = (tf - nf - 1.0) * (tf - nf - 4.0) / (tf * (tf - 2.0));
        let ratio = nf / tf;
        let w = (si_mu * (eta / (eta + ratio)) + si_one * (mu_g * ratio / (eta + ratio))) * (c3 / self.gamma);
        Ok(cap_gross(w.iter().copied().collect(), self.cap))
    }
}

/// A trained policy as a backtest strategy.
pub struct PolicyStrategy<P: Policy> {
    name: String,
    policy: P,
    params: ParamStore,
}

impl<P: Policy> PolicyStrategy<P> {
    pub fn new(name: impl Into<String>, policy: P, params: ParamStore) -> Self {
        Self {
            name: name.into(),
            policy,
            params,
        }
    }
}

impl<P: Policy> Strategy for PolicyStrategy<P> {
    fn name(&self) -> &str {
        &self.name
    }
    fn long_only(&self) -> bool {
        false
    }
    fn reset(&mut self, _n: usize, _k: usize) {}
    fn decide(&mut self, state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        Ok(self.policy.weights(&self.params, state)?)
    }
}

/// Fixed weights every period.
#[derive(Debug, Clone)]
pub struct FixedWeights {
    name: String,
    weights: Vec<f64>,
}

impl FixedWeights {
    pub fn new(name: impl Into<String>, weights: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            weights,
        }
    }
}

impl Strategy for FixedWeights {
    fn name(&self) -> &str {
        &self.name
    }
    fn long_only(&self) -> bool {
        false
    }
    fn reset(&mut self, _n: usize, _k: usize) {}
    fn decide(&mut self, _state: &AgentState) -> Result<Vec<f64>, BacktestError> {
        Ok(self.weights.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn metric_examples() {
        let (m, flags) = metric_suite(&[0.001; 20]).unwrap();
        assert!((m.ar - 0.02).abs() < 1e-15 && (m.dr - 0.001).abs() < 1e-15);
        assert!(m.std == 0.0 && m.lstd == 0.0);
        assert!(flags.contains(&Flag::SrDegenerate) && flags.contains(&Flag::StrDegenerate));

        let (m, _) = metric_suite(&[0.02, -0.02]).unwrap();
        assert_eq!(m.dr, 0.0);
        assert!((m.std - 0.02).abs() < 1e-15);
        assert!((m.lstd - (0.0004f64 / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(m.str_, 0.0);

        let s: Vec<f64> = [0.01; 5].iter().chain([-0.01; 5].iter()).copied().collect();
        let (m, _) = metric_suite(&s).unwrap();
        assert!(m.dr.abs() < 1e-18);
        assert!((m.std - 0.01).abs() < 1e-15);
        assert!((m.lstd - (5e-4f64 / 10.0).sqrt()).abs() < 1e-15);
        assert!(matches!(metric_suite(&[]), Err(BacktestError::EmptySeries)));
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = project_simplex(&[2.0, 0.0, -1.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.1, 0.2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[1] - p[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn metric_projection_matches_euclidean_for_identity() {
        let q = DVector::from_vec(vec![0.7, 0.6, -0.2]);
        let a = project_simplex_metric(&q, &DMatrix::identity(3, 3));
        let b = project_simplex(q.as_slice());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn kan_zhou_adjustment_is_positive() {
        for &psi2 in &[0.0, 1e-4, 0.01, 0.5] {
            assert!(kan_zhou_psi2(psi2, 250, 29) >= 0.0);
        }
        // large samples make the correction vanish
        let big = kan_zhou_psi2(0.5, 1_000_000, 3);
        assert!((big - 0.5).abs() < 1e-3);
    }

    #[test]
    fn relatives_from_history() {
        let h = DMatrix::from_row_slice(4, 2, &[9.0, 9.0, 0.5, -1.0, 0.5, 0.0, 1.0, 0.0]);
        let s = AgentState {
            prev_weights: vec![0.0; 2],
            history: Arc::new(h),
        };
        assert_eq!(price_relatives(&s, 2, 1), vec![2f64.powf(1.5), 1.0]);
    }

    #[test]
    fn mean_variance_rules_hold_cash_on_short_samples() {
        let s = AgentState {
            prev_weights: vec![0.0; 3],
            history: Arc::new(DMatrix::from_fn(5, 3, |d, i| 0.01 * ((d + i) % 3) as f64)),
        };
        assert_eq!(JorionBayesStein::new(3.0, 1.0).decide(&s).unwrap(), vec![0.0; 3]);
        assert_eq!(KanZhou::new(3.0, 1.0).decide(&s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn summary_sorted_by_ar() {
        let m = |ar| Metrics {
            ar,
            dr: 0.0,
            std: 0.0,
            sr: 0.0,
            lstd: 0.0,
            str_: 0.0,
        };
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &[("a".into(), m(0.1)), ("b".into(), m(0.3))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "strategy,AR,DR,Std,SR,LStd,STR");
        assert!(lines[1].starts_with("b,"));
    }
}
