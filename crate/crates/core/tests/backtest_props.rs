mod common;

use bda_core::backtest::*;
use bda_core::env::MarketEnv;
use bda_core::exchange::CostSchedule;
use bda_core::nalgebra::DMatrix;
use bda_core::synthetic::{from_log_returns, geometric_random_walk, RandomWalkSpec};
use chrono::NaiveDate;
use proptest::prelude::*;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
}

fn env_from(z: DMatrix<f64>, window: usize, costs: CostSchedule) -> MarketEnv {
    let first = vec![100.0; z.ncols()];
    MarketEnv::new(from_log_returns(&first, &z, start()).unwrap(), window, costs).unwrap()
}

fn walk(n: usize, days: usize, seed: u64) -> MarketEnv {
    let spec = RandomWalkSpec::new(n, days, seed);
    MarketEnv::new(geometric_random_walk(&spec).unwrap(), 3, CostSchedule::standard(5)).unwrap()
}

#[test]
fn all_cash_is_flat_and_flagged() {
    let env = walk(3, 120, 0);
    let r = run_backtest(&mut FixedWeights::new("cash", vec![0.0; 3]), &env, 1e6).unwrap();
    assert_eq!(r.metrics.ar, 0.0);
    assert_eq!(r.metrics.sr, 0.0);
    assert!(r.flags.contains(&Flag::SrDegenerate) && r.flags.contains(&Flag::StrDegenerate));
    assert_eq!(r.final_value, 1e6);
}

#[test]
fn single_asset_hold_matches_hand_ledger() {
    let z = DMatrix::from_fn(60, 1, |d, _| 0.004 * ((d * 7 % 5) as f64 - 2.0));
    let env = env_from(z, 2, CostSchedule::free(5));
    let initial = 1e5;
    let r = run_backtest(&mut FixedWeights::new("hold", vec![1.0]), &env, initial).unwrap();
    let prices = env.panel().prices();
    let (mut cash, mut q, mut last) = (initial, 0.0f64, initial);
    let mut oracle = Vec::new();
    for t in env.decision_periods() {
        let p0 = prices[(5 * t, 0)];
        let target = (0.5 * initial / p0).floor();
        cash -= (target - q) * p0;
        q = target;
        for d in 5 * t + 1..=5 * t + 5 {
            let v = cash + q * prices[(d, 0)];
            oracle.push((v / last).log2());
            last = v;
        }
    }
    assert_eq!(r.daily_returns.len(), oracle.len());
    for (a, b) in r.daily_returns.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!((r.final_value - last).abs() < 1e-6);
}

#[test]
fn constant_prices_give_zero_return() {
    let env = env_from(DMatrix::zeros(80, 3), 3, CostSchedule::free(5));
    for r in run_all(baselines(&BaselineConfig::default()), &env, 1e6) {
        let r = r.unwrap();
        assert_eq!(r.metrics.ar, 0.0, "{}", r.name);
    }
}

#[test]
fn rebalancing_harvests_mirrored_swings() {
    let z = DMatrix::from_fn(100, 2, |d, i| if (d + i) % 2 == 0 { 0.1 } else { -0.1 });
    let env = env_from(z, 2, CostSchedule::free(1));
    let crp = run_backtest(&mut Crp, &env, 1e6).unwrap();
    assert!(crp.metrics.ar > 0.0, "{}", crp.metrics.ar);
    // each asset ends where it started
    let p = env.panel().prices();
    let first = env.grid().exec_price_day(env.decision_periods().start);
    for i in 0..2 {
        assert!((p[(p.nrows() - 1, i)] / p[(first, i)] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn eg_without_learning_is_crp() {
    let env = walk(4, 150, 3);
    let a = run_backtest(&mut Crp, &env, 1e6).unwrap();
    let b = run_backtest(&mut Eg::new(0.0), &env, 1e6).unwrap();
    assert_eq!(a.daily_returns, b.daily_returns);
}

#[test]
fn ubah_holds_without_trading_on_flat_prices() {
    let env = env_from(DMatrix::zeros(60, 2), 2, CostSchedule::standard(5));
    let r = run_backtest(&mut Ubah::default(), &env, 1e6).unwrap();
    let traded: usize = r.fills.iter().skip(1).map(|(_, f)| f.len()).sum();
    assert_eq!(traded, 0);
    assert!(r.weights.iter().all(|w| w == &r.weights[0]));
}

#[test]
fn long_only_baselines_stay_on_simplex() {
    for seed in 0..5 {
        let env = walk(4, 200, seed);
        for (r, s) in run_all(baselines(&BaselineConfig::default()), &env, 1e6)
            .into_iter()
            .zip(baselines(&BaselineConfig::default()))
        {
            let r = r.unwrap();
            assert!(!r.truncated(), "{}", r.name);
            if s.long_only() {
                for w in &r.weights {
                    assert!(w.iter().all(|&x| x >= 0.0));
                    assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12, "{} {w:?}", r.name);
                }
            }
        }
    }
}

#[test]
fn series_length_and_aggregates() {
    let env = walk(3, 200, 9);
    let r = run_backtest(&mut Crp, &env, 1e6).unwrap();
    let periods = env.decision_periods().len();
    assert_eq!(r.daily_returns.len(), 5 * periods);
    assert!((r.metrics.ar - (5 * periods) as f64 * r.metrics.dr).abs() < 1e-14);
    let total = (r.final_value / 1e6).log2();
    assert!((r.metrics.ar - total).abs() < 1e-12);
}

#[test]
fn leveraged_crash_truncates() {
    let z = DMatrix::from_fn(60, 2, |d, i| if d == 30 && i == 0 { -3.0 } else { 0.0 });
    let env = env_from(z, 2, CostSchedule::free(5));
    let r = run_backtest(&mut FixedWeights::new("lev", vec![8.0, -1.0]), &env, 1e6).unwrap();
    assert!(r.truncated());
    assert!(r.daily_returns.len() < 5 * env.decision_periods().len());
}

#[test]
fn summary_is_ranked_by_ar() {
    let env = walk(3, 150, 4);
    let reports: Vec<(String, Metrics)> = run_all(baselines(&BaselineConfig::default()), &env, 1e6)
        .into_iter()
        .map(|r| r.map(|r| (r.name, r.metrics)).unwrap())
        .collect();
    let mut out = Vec::new();
    write_summary_csv(&mut out, &reports).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("strategy,AR,DR,Std,SR,LStd,STR"));
    let ars: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ars.len(), reports.len());
    assert!(ars.windows(2).all(|w| w[0] >= w[1]));
}

proptest! {
    #[test]
    fn moment_identities(xs in prop::collection::vec(-0.1f64..0.1, 1..200)) {
        let (m, _) = metric_suite(&xs).unwrap();
        let sq = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        prop_assert!(m.lstd * m.lstd <= sq + 1e-15);
        prop_assert!((m.std * m.std + m.dr * m.dr - sq).abs() <= 1e-12);
        prop_assert!(m.lstd >= 0.0 && m.std >= 0.0);
        if xs.iter().all(|&x| x >= 0.0) {
            prop_assert_eq!(m.lstd, 0.0);
        }
    }
}
