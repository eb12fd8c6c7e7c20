use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bda_core::backtest::{baselines, run_all, write_summary_csv, MetricReport, Metrics, PolicyStrategy, Strategy};
use bda_core::env::MarketEnv;
use bda_core::gradnet::checkpoint;
use bda_core::marketdata::{load_price_panel, parse_ticker_manifest, PricePanel};
use bda_core::policy::{BdaPolicy, Policy, PolicyConfig};
use bda_core::synthetic::{geometric_random_walk, RandomWalkSpec};
use bda_core::trainer::{train_with, StageRecord, TrainError, TrainTrace};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{sha256_file, RunManifest};

/// Written next to every checkpoint so a backtest can rebuild the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySidecar {
    pub variant: String,
    pub stage: usize,
    pub window: usize,
    pub days_per_period: usize,
    pub tickers: Vec<String>,
    pub policy: PolicyConfig,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::internal(format!("cannot create {}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::internal(format!("cannot create {}: {e}", path.display())))
}

fn read_tickers(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let tickers = parse_ticker_manifest(&text);
    if tickers.is_empty() {
        return Err(CliError::input(format!("{} lists no tickers", path.display())));
    }
    Ok(tickers)
}

fn load_cache(cfg: &RunConfig) -> Result<(PricePanel, String), CliError> {
    let path = &cfg.data.cache;
    if !path.exists() {
        return Err(CliError::input(format!(
            "cannot read {}: no cached panel, run `bda ingest` first",
            path.display()
        )));
    }
    let tickers = read_tickers(&cfg.data.tickers)?;
    let panel = load_price_panel(path, &tickers, 2).map_err(|e| CliError::input(e.to_string()))?;
    Ok((panel, sha256_file(path)?))
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let tickers = read_tickers(&cfg.data.tickers)?;
    let panel = load_price_panel(&cfg.data.prices, &tickers, 2).map_err(|e| CliError::input(e.to_string()))?;
    let cache = &cfg.data.cache;
    if let Some(dir) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut out = create(cache)?;
    panel.write_csv(&mut out).map_err(CliError::internal)?;
    out.flush().map_err(CliError::internal)?;
    drop(out);
    let hash = sha256_file(cache)?;
    let mut m = RunManifest::new("ingest", String::new(), cfg.train.seed, cfg.to_toml(), sha256_file(&cfg.data.prices)?);
    m.artifacts.insert(cache.display().to_string(), hash.clone());
    let dir = cfg.output.dir.join("ingest");
    create_dir(&dir)?;
    m.write(&dir)?;
    println!(
        "cached {} assets x {} days ({} .. {}) to {} sha256 {hash}",
        panel.n_assets(),
        panel.n_days(),
        panel.dates()[0],
        panel.dates()[panel.n_days() - 1],
        cache.display()
    );
    Ok(())
}

fn write_trace(trace: &TrainTrace, path: &Path, variant: &str) -> Result<(), CliError> {
    let mut out = create(path)?;
    trace.write_csv(&mut out, Some(variant)).map_err(CliError::internal)?;
    out.flush().map_err(CliError::internal)
}

fn save_checkpoint(
    dir: &Path,
    stem: &str,
    params: &bda_core::gradnet::ParamStore,
    sidecar: &PolicySidecar,
) -> Result<(), CliError> {
    checkpoint::save(params, dir.join(format!("{stem}.ckpt"))).map_err(CliError::internal)?;
    let text = toml::to_string_pretty(sidecar).map_err(CliError::internal)?;
    fs::write(dir.join(format!("{stem}.toml")), text).map_err(CliError::internal)
}

fn env_error(e: impl std::fmt::Display) -> CliError {
    CliError::input(e.to_string())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (panel, data_hash) = load_cache(cfg)?;
    let w = &cfg.windows;
    let panel = panel.between(w.train_start, w.train_end);
    let costs = cfg.costs_schedule()?;
    let env = MarketEnv::new(panel, cfg.grid.window, costs).map_err(env_error)?;
    let n = env.n_assets();
    let pcfg = cfg.policy_config(n);
    let policy = BdaPolicy::new(pcfg.clone()).map_err(|e| CliError::input(e.to_string()))?;
    let tcfg = cfg.train_config();
    let params = policy.init_params(tcfg.seed).map_err(CliError::internal)?;
    let variant = cfg.ablation.variant();

    let dir = cfg.output.dir.join("train");
    create_dir(&dir)?;
    let mut sidecar = PolicySidecar {
        variant: variant.clone(),
        stage: 0,
        window: cfg.grid.window,
        days_per_period: cfg.days_per_period(),
        tickers: env.tickers().to_vec(),
        policy: pcfg,
    };
    let mut m = RunManifest::new("train", variant.clone(), tcfg.seed, cfg.to_toml(), data_hash);
    let mut stems = Vec::new();

    let result = train_with(&env, &policy, params, &tcfg, |rec: &StageRecord, ps| {
        let stem = format!("stage_{:04}", rec.stage);
        let side = PolicySidecar {
            stage: rec.stage,
            ..sidecar.clone()
        };
        save_checkpoint(&dir, &stem, ps, &side).map_err(|e| TrainError::Hook(e.to_string()))?;
        stems.push(stem);
        eprintln!(
            "stage {:>4} steps {:>8} OP {:+.6e} EF {:+.6e} AR_tr {:+.6} ARD_tr {:+.6}",
            rec.stage, rec.steps, rec.op, rec.ef, rec.ar_tr, rec.ard_tr
        );
        Ok(())
    });

    let trace_path = dir.join("trace.csv");
    let (params, trace) = match result {
        Ok(v) => v,
        Err(TrainError::DivergenceDetected { stage, reason, trace }) => {
            write_trace(&trace, &trace_path, &variant)?;
            return Err(CliError::Divergence(format!(
                "stage {stage}: {reason}; partial trace in {}",
                trace_path.display()
            )));
        }
        Err(e @ (TrainError::Config(_) | TrainError::EmptyBuffer)) => return Err(CliError::input(e.to_string())),
        Err(e) => return Err(CliError::internal(e)),
    };
    write_trace(&trace, &trace_path, &variant)?;
    sidecar.stage = trace.len();
    save_checkpoint(&dir, "final", &params, &sidecar)?;

    m.record(&dir, "trace.csv")?;
    for stem in stems.iter().map(String::as_str).chain(["final"]) {
        m.record(&dir, &format!("{stem}.ckpt"))?;
        m.record(&dir, &format!("{stem}.toml"))?;
    }
    m.write(&dir)?;
    match trace.records.last() {
        Some(r) => println!(
            "{variant}: {} stages, {} steps; OP {:+.6e} EF {:+.6e} AR_tr {:+.6} ARD_tr {:+.6}",
            trace.len(),
            r.steps,
            r.op,
            r.ef,
            r.ar_tr,
            r.ard_tr
        ),
        None => println!("{variant}: no training stage ran"),
    }
    Ok(())
}

fn load_policy(path: &Path, env: &MarketEnv, cfg: &RunConfig) -> Result<(String, BdaPolicy, bda_core::gradnet::ParamStore), CliError> {
    let side_path = path.with_extension("toml");
    let text = fs::read_to_string(&side_path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", side_path.display())))?;
    let side: PolicySidecar = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", side_path.display())))?;
    if side.tickers != env.tickers() {
        return Err(CliError::input(format!("{} was trained on other tickers", path.display())));
    }
    if side.window != cfg.grid.window || side.days_per_period != cfg.days_per_period() {
        return Err(CliError::input(format!(
            "{} uses window {} x {} days, config has {} x {}",
            path.display(),
            side.window,
            side.days_per_period,
            cfg.grid.window,
            cfg.days_per_period()
        )));
    }
    let params = checkpoint::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let policy = BdaPolicy::new(side.policy).map_err(|e| CliError::input(e.to_string()))?;
    Ok((side.variant, policy, params))
}

pub fn backtest(cfg: &RunConfig, checkpoint: Option<&Path>, baselines_only: bool) -> Result<(), CliError> {
    if checkpoint.is_none() && !baselines_only {
        return Err(CliError::MissingCheckpoint);
    }
    let (panel, data_hash) = load_cache(cfg)?;
    let w = &cfg.windows;
    let first = panel.position_of(w.backtest_start);
    if first + w.backtest_days > panel.n_days() {
        return Err(CliError::input(format!(
            "panel ends {} days into the {}-day backtest window",
            panel.n_days().saturating_sub(first),
            w.backtest_days
        )));
    }
    let costs = cfg.costs_schedule()?;
    let env = MarketEnv::out_of_sample(&panel, first, w.backtest_days, cfg.grid.window, costs).map_err(env_error)?;

    let mut strategies: Vec<Box<dyn Strategy>> = Vec::new();
    let mut variant = String::new();
    if let Some(path) = checkpoint.filter(|_| !baselines_only) {
        let (name, policy, params) = load_policy(path, &env, cfg)?;
        strategies.push(Box::new(PolicyStrategy::new(name.clone(), policy, params)));
        variant = name;
    }
    strategies.extend(baselines(&cfg.baselines));

    let dir = cfg.output.dir.join("backtest");
    create_dir(&dir)?;
    let mut m = RunManifest::new("backtest", variant, cfg.train.seed, cfg.to_toml(), data_hash);
    if let Some(p) = checkpoint.filter(|_| !baselines_only) {
        m.artifacts.insert(p.display().to_string(), sha256_file(p)?);
    }
    let reports: Vec<MetricReport> = run_all(strategies, &env, cfg.train.initial_amount)
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(CliError::internal)?;

    let mut rows = Vec::new();
    let mut truncated = Vec::new();
    for r in &reports {
        let stem = r.name.replace(['/', ' '], "_");
        let files = [
            format!("{stem}.json"),
            format!("{stem}_series.csv"),
            format!("{stem}_weights.csv"),
        ];
        let mut out = create(&dir.join(&files[0]))?;
        r.write_json(&mut out).map_err(CliError::internal)?;
        writeln!(out).map_err(CliError::internal)?;
        out.flush().map_err(CliError::internal)?;
        let mut out = create(&dir.join(&files[1]))?;
        r.write_series_csv(&mut out).map_err(CliError::internal)?;
        let mut out = create(&dir.join(&files[2]))?;
        r.write_weights_csv(&mut out, env.tickers()).map_err(CliError::internal)?;
        drop(out);
        for f in &files {
            m.record(&dir, f)?;
        }
        rows.push((r.name.clone(), r.metrics));
        if r.truncated() {
            truncated.push(format!("{} {:?}", r.name, r.flags));
        }
    }
    let mut out = create(&dir.join("summary.csv"))?;
    write_summary_csv(&mut out, &rows).map_err(CliError::internal)?;
    out.flush().map_err(CliError::internal)?;
    drop(out);
    m.record(&dir, "summary.csv")?;
    m.write(&dir)?;
    print_table(&rows, env.decision_periods().len());
    if truncated.is_empty() {
        Ok(())
    } else {
        Err(CliError::Truncated(truncated.join(", ")))
    }
}

fn print_table(rows: &[(String, Metrics)], periods: usize) {
    let mut sorted: Vec<&(String, Metrics)> = rows.iter().collect();
    sorted.sort_by(|a, b| b.1.ar.total_cmp(&a.1.ar).then_with(|| a.0.cmp(&b.0)));
    println!("{periods} periods");
    println!("{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "strategy", "AR", "DR", "Std", "SR", "LStd", "STR");
    for (name, m) in sorted {
        println!(
            "{:<12} {:>10.5} {:>10.6} {:>10.6} {:>10.5} {:>10.6} {:>10.5}",
            name, m.ar, m.dr, m.std, m.sr, m.lstd, m.str_
        );
    }
}

#[derive(Deserialize)]
struct ReportRow {
    name: String,
    #[serde(flatten)]
    metrics: Metrics,
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::input(format!("cannot read {}: {e}", p.display())))?;
        let row: ReportRow = serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
        rows.push((row.name, row.metrics));
    }
    match out {
        Some(path) => {
            let mut w = create(path)?;
            write_summary_csv(&mut w, &rows).map_err(CliError::internal)?;
            w.flush().map_err(CliError::internal)
        }
        None => write_summary_csv(std::io::stdout().lock(), &rows).map_err(CliError::internal),
    }
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub tickers: Option<PathBuf>,
    pub assets: usize,
    pub days: usize,
    pub seed: u64,
    pub drift: f64,
    pub vol: f64,
    pub correlation: f64,
    pub start: NaiveDate,
}

/// Seeded random-walk prices in the ingest format.
pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let names = match &a.tickers {
        Some(p) => read_tickers(p)?,
        None => (1..=a.assets).map(|i| format!("S{i:02}")).collect(),
    };
    let mut spec = RandomWalkSpec::new(names.len(), a.days, a.seed);
    spec.drift = vec![a.drift; names.len()];
    spec.vol = vec![a.vol; names.len()];
    spec.correlation = a.correlation;
    spec.start_date = a.start;
    let raw = geometric_random_walk(&spec).map_err(|e| CliError::input(e.to_string()))?;
    let panel = PricePanel::new(names, raw.dates().to_vec(), raw.prices().clone()).map_err(|e| CliError::input(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut out = create(&a.out)?;
    panel.write_csv(&mut out).map_err(CliError::internal)?;
    out.flush().map_err(CliError::internal)?;
    println!("wrote {} assets x {} days to {}", panel.n_assets(), panel.n_days(), a.out.display());
    Ok(())
}
