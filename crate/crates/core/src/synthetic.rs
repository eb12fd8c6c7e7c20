//! Seeded synthetic price panels for tests and demos.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::marketdata::{DataError, PricePanel};

/// Daily log2 returns `drift_i + vol_i (√ρ f + √(1−ρ) ε_i)` with a common
/// factor `f` and idiosyncratic noise `ε_i`, both standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWalkSpec {
    pub n_days: usize,
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
    pub correlation: f64,
    pub start_price: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl RandomWalkSpec {
    pub fn new(n_assets: usize, n_days: usize, seed: u64) -> Self {
        Self {
            n_days,
            drift: vec![0.0; n_assets],
            vol: vec![0.01; n_assets],
            correlation: 0.0,
            start_price: 100.0,
            start_date: NaiveDate::from_ymd_opt(2018, 1, 2).expect("valid date"),
            seed,
        }
    }
}

pub fn geometric_random_walk(spec: &RandomWalkSpec) -> Result<PricePanel, DataError> {
    let n = spec.drift.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = spec.correlation.clamp(0.0, 1.0);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let rows = spec.n_days.saturating_sub(1);
    let mut z = DMatrix::zeros(rows, n);
    for d in 0..rows {
        let f: f64 = StandardNormal.sample(&mut rng);
        for i in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            z[(d, i)] = spec.drift[i] + spec.vol[i] * (a * f + b * e);
        }
    }
    from_log_returns(&vec![spec.start_price; n], &z, spec.start_date)
}

/// Prices that start at `first` and follow the log2 returns `z`, dated on
/// consecutive weekdays from `start`.
pub fn from_log_returns(first: &[f64], z: &DMatrix<f64>, start: NaiveDate) -> Result<PricePanel, DataError> {
    let n = first.len();
    let days = z.nrows() + 1;
    let mut p = DMatrix::zeros(days, n);
    for i in 0..n {
        p[(0, i)] = first[i];
        for d in 1..days {
            p[(d, i)] = p[(d - 1, i)] * 2f64.powf(z[(d - 1, i)]);
        }
    }
    let tickers = (0..n).map(|i| format!("S{:02}", i + 1)).collect();
    PricePanel::single_or_more(tickers, weekdays(start, days), p)
}

pub fn weekdays(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}
