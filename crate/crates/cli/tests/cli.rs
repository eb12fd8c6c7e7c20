use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bda_core::backtest::{run_backtest, Crp};
use bda_core::env::MarketEnv;
use bda_core::exchange::CostSchedule;
use bda_core::marketdata::load_price_panel;
use tempfile::TempDir;

fn bda(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bda"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"
[data]
prices = "prices.csv"
tickers = "tickers.txt"
cache = "panel.csv"

[grid]
window = 10

[train]
learning_rate = 0.1
minibatch = 128
target_step = 256
total_steps = 256

[policy]
depth = 1
head_hidden = 8

[windows]
train_start = "2018-01-01"
train_end = "2019-06-30"
backtest_start = "2019-07-01"
backtest_days = 120

[output]
dir = "out"
"#;

/// Temp dir with five synthetic tickers, ingested.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tickers.txt"), "AAA\nBBB\nCCC\nDDD\nEEE\n").unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&bda(
        &["synth", "--out", "prices.csv", "--tickers", "tickers.txt", "--days", "600", "--seed", "3"],
        dir.path(),
    ));
    ok(&bda(&["ingest", "-c", "run.toml"], dir.path()));
    dir
}

#[test]
fn missing_source_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tickers.txt"), "AAA\nBBB\n").unwrap();
    let out = bda(
        &["ingest", "--prices", "nowhere.csv", "--tickers", "tickers.txt", "--cache", "c.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));

    let out = bda(&["train", "--cache", "absent.csv", "--tickers", "tickers.txt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn ingest_is_stable_and_keeps_the_universe() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/djia_tickers.txt");
    let manifest = fs::read_to_string(&root).unwrap();
    fs::write(dir.path().join("tickers.txt"), &manifest).unwrap();
    ok(&bda(
        &["synth", "--out", "p.csv", "--tickers", "tickers.txt", "--days", "80"],
        dir.path(),
    ));
    let args = ["ingest", "--prices", "p.csv", "--tickers", "tickers.txt", "--cache", "c.csv", "--out-dir", "o"];
    let first = ok(&bda(&args, dir.path()));
    let second = ok(&bda(&args, dir.path()));
    assert_eq!(first, second);
    assert!(first.starts_with("cached 29 assets"), "{first}");
    let tickers: Vec<String> = manifest.lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
    let panel = load_price_panel(dir.path().join("c.csv"), &tickers, 2).unwrap();
    assert_eq!(panel.n_assets(), 29);
}

#[test]
fn smoke_training_is_one_stage_and_reproducible() {
    let dir = workspace();
    let out = ok(&bda(&["train", "-c", "run.toml"], dir.path()));
    assert!(out.contains("1 stages, 256 steps"), "{out}");
    let trace_path = dir.path().join("out/train/trace.csv");
    let first = fs::read(&trace_path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# variant=BDA");
    assert_eq!(lines[1], "stage,steps,OP,EF,AR_tr,ARD_tr");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,256,"));
    for f in ["stage_0001.ckpt", "stage_0001.toml", "final.ckpt", "manifest.json"] {
        assert!(dir.path().join("out/train").join(f).exists(), "{f}");
    }
    let ckpt = fs::read(dir.path().join("out/train/final.ckpt")).unwrap();

    ok(&bda(&["train", "-c", "run.toml"], dir.path()));
    assert_eq!(fs::read(&trace_path).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("out/train/final.ckpt")).unwrap(), ckpt);
}

#[test]
fn ablation_flag_labels_the_trace() {
    let dir = workspace();
    ok(&bda(&["train", "-c", "run.toml", "--ablation", "softmax_head", "--out-dir", "v4"], dir.path()));
    let text = fs::read_to_string(dir.path().join("v4/train/trace.csv")).unwrap();
    assert!(text.starts_with("# variant=BDA-V4\n"));
    let side = fs::read_to_string(dir.path().join("v4/train/final.toml")).unwrap();
    assert!(side.contains("head = \"softmax\""), "{side}");
}

fn json_field(path: &Path, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v[key].as_f64().unwrap()
}

#[test]
fn baselines_only_backtest() {
    let dir = workspace();
    let out = ok(&bda(&["backtest", "-c", "run.toml", "--baselines-only"], dir.path()));
    assert!(out.starts_with("24 periods"), "{out}");
    let bt = dir.path().join("out/backtest");
    let reports: Vec<PathBuf> = fs::read_dir(&bt)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json") && !p.ends_with("manifest.json"))
        .collect();
    assert_eq!(reports.len(), 8);
    let weights = fs::read_to_string(bt.join("CRP_weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 25);
    let series = fs::read_to_string(bt.join("CRP_series.csv")).unwrap();
    assert_eq!(series.lines().count(), 121);

    // same numbers as the library on the same cached panel
    let tickers: Vec<String> = ["AAA", "BBB", "CCC", "DDD", "EEE"].map(String::from).to_vec();
    let panel = load_price_panel(dir.path().join("panel.csv"), &tickers, 2).unwrap();
    let first = panel.position_of(chrono::NaiveDate::from_ymd_opt(2019, 7, 1).unwrap());
    let env = MarketEnv::out_of_sample(&panel, first, 120, 10, CostSchedule::standard(5)).unwrap();
    let lib = run_backtest(&mut Crp, &env, 1e8).unwrap();
    assert_eq!(json_field(&bt.join("CRP.json"), "AR"), lib.metrics.ar);

    let summary = fs::read_to_string(bt.join("summary.csv")).unwrap();
    let ars: Vec<f64> = summary.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ars.len(), 8);
    assert!(ars.windows(2).all(|w| w[0] >= w[1]));

    let mut args = vec!["report".to_string(), "-o".into(), "table.csv".into()];
    args.extend(reports.iter().map(|p| p.display().to_string()));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&bda(&argv, dir.path()));
    assert_eq!(fs::read_to_string(dir.path().join("table.csv")).unwrap(), summary);
}

#[test]
fn agent_backtest_needs_a_checkpoint() {
    let dir = workspace();
    let out = bda(&["backtest", "-c", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn trained_agent_backtest_is_reproducible() {
    let dir = workspace();
    ok(&bda(&["train", "-c", "run.toml"], dir.path()));
    let args = ["backtest", "-c", "run.toml", "--checkpoint", "out/train/final.ckpt"];
    ok(&bda(&args, dir.path()));
    let first = fs::read(dir.path().join("out/backtest/BDA.json")).unwrap();
    ok(&bda(&args, dir.path()));
    assert_eq!(fs::read(dir.path().join("out/backtest/BDA.json")).unwrap(), first);
    let summary = fs::read_to_string(dir.path().join("out/backtest/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 10);

    // a checkpoint from another grid is refused
    let out = bda(&["backtest", "-c", "run.toml", "--checkpoint", "out/train/final.ckpt", "--ablation", "one_day_period"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = fs::read_to_string(root.join("default.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&bda(&["config"], dir.path()));
    assert_eq!(printed, default);
    for name in ["default.toml", "smoke.toml"] {
        let out = bda(&["backtest", "-c", root.join(name).to_str().unwrap(), "--cache", "none.csv", "--baselines-only"], dir.path());
        // the config is fine; only the missing cache stops the run
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("none.csv"), "{name}");
    }
}
