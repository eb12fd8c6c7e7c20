mod common;

use bda_core::env::MarketEnv;
use bda_core::exchange::{step_period, target_quantity, write_order_log, CostSchedule, Ledger};
use bda_core::nalgebra::DMatrix;
use bda_core::synthetic::{geometric_random_walk, RandomWalkSpec};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn market(seed: u64, days: usize, k: usize) -> MarketEnv {
    let mut spec = RandomWalkSpec::new(3, days, seed);
    spec.vol = vec![0.01, 0.015, 0.02];
    MarketEnv::new(geometric_random_walk(&spec).unwrap(), 1, CostSchedule::standard(k)).unwrap()
}

fn run_random_actions(env: &MarketEnv, seed: u64) -> (Vec<f64>, String) {
    let mut r = rng(seed);
    let n = env.n_assets();
    let mut ledger = Ledger::new(1e6, n);
    let mut values = Vec::new();
    let mut fills = Vec::new();
    for t in env.decision_periods() {
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
        let exec = env.exec_prices(t);
        let q = target_quantity(&w, ledger.invest_amount, &exec);
        let out = step_period(&mut ledger, &q, &exec, &env.period_prices(t), env.costs()).unwrap();
        values.push(ledger.total_value);
        fills.push((t, out.fills));
    }
    let mut buf = Vec::new();
    write_order_log(&mut buf, env.tickers(), fills.iter().map(|(t, f)| (*t, f.as_slice()))).unwrap();
    (values, String::from_utf8(buf).unwrap())
}

#[test]
fn order_log_replays_the_ledger() {
    let env = market(1, 80, 5);
    let c = env.costs();
    for seed in 0..50 {
        let (values, log) = run_random_actions(&env, seed);
        let replay = replay_order_log(
            &log,
            env.panel().prices(),
            env.tickers(),
            env.decision_periods(),
            5,
            1e6,
            c.commission_rate,
            c.cash_rate_per_period(),
            c.stock_rate_per_period(),
        );
        for (a, b) in values.iter().zip(&replay) {
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
    }
}

#[test]
fn free_trading_on_constant_prices_keeps_value() {
    let p = [12.5, 40.0, 3.25];
    let daily = DMatrix::from_fn(5, 3, |_, i| p[i]);
    let mut ledger = Ledger::new(1e5, 3);
    let mut r = rng(4);
    for _ in 0..30 {
        let w: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let q = target_quantity(&w, ledger.invest_amount, &p);
        let out = step_period(&mut ledger, &q, &p, &daily, &CostSchedule::free(5)).unwrap();
        assert_eq!(ledger.total_value, 1e5);
        assert_eq!(out.xi, 0.0);
    }
}

#[test]
fn one_share_per_period_telescopes() {
    let env = market(9, 60, 1);
    let mut ledger = Ledger::new(1e6, 3);
    let mut r = rng(2);
    for t in env.decision_periods() {
        let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let exec = env.exec_prices(t);
        let q = target_quantity(&w, ledger.invest_amount, &exec);
        let out = step_period(&mut ledger, &q, &exec, &env.period_prices(t), env.costs()).unwrap();
        assert_eq!(out.daily_returns.len(), 1);
        assert!((out.daily_returns[0] - out.xi).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn floor_matches_rational_arithmetic(num in -10_000i64..10_000, invest in 1i64..100_000, price in 1i64..1000) {
        // w = num/10000 exactly representable after scaling; compare with
        // integer floor division of invest*num by 10000*price.
        let w = num as f64 / 10_000.0;
        let q = target_quantity(&[w], invest as f64, &[price as f64])[0];
        let exact = (invest * num).div_euclid(10_000 * price);
        let frac = (invest * num).rem_euclid(10_000 * price);
        // values within one ulp of an integer boundary may round either way
        if frac != 0 && frac != 10_000 * price - 1 {
            prop_assert_eq!(q, exact);
        }
    }

    #[test]
    fn daily_returns_sum_to_period_return(seed in any::<u64>()) {
        let env = market(seed % 7, 40, 5);
        let mut r = rng(seed);
        let mut ledger = Ledger::new(1e6, 3);
        for t in env.decision_periods() {
            let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.5..1.5)).collect();
            let exec = env.exec_prices(t);
            let q = target_quantity(&w, ledger.invest_amount, &exec);
            let out = step_period(&mut ledger, &q, &exec, &env.period_prices(t), env.costs()).unwrap();
            let s: f64 = out.daily_returns.iter().sum();
            prop_assert!((s - out.xi).abs() < 1e-12);
            prop_assert!(out.txn_scale_ratio >= 0.0);
        }
    }

    #[test]
    fn transaction_scale_is_scale_free(scale in 0.01f64..100.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let p: Vec<f64> = (0..3).map(|_| r.random_range(5.0..50.0)).collect();
        let held: Vec<i64> = (0..3).map(|_| r.random_range(-50..50)).collect();
        let target: Vec<i64> = (0..3).map(|_| r.random_range(-50..50)).collect();
        let run = |c: f64| {
            let mut l = Ledger::new(1e4 * c, 3);
            l.holdings = held.clone();
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            let daily = DMatrix::from_fn(5, 3, |_, i| ps[i]);
            step_period(&mut l, &target, &ps, &daily, &CostSchedule::standard(5)).unwrap().txn_scale_ratio
        };
        let (a, b) = (run(1.0), run(scale));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }
}
