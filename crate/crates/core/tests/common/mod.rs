#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use bda_core::gradnet::{ParamStore, Tensor};
use bda_core::marketdata::AgentState;
use bda_core::nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Q diag(λ) Qᵀ with eigenvalues drawn from `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)));
    let s = &q * d * q.transpose();
    (&s + s.transpose()) * 0.5
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn random_state(rng: &mut ChaCha8Rng, rows: usize, n: usize, scale: f64) -> AgentState {
    AgentState {
        prev_weights: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        history: Arc::new(DMatrix::from_fn(rows, n, |_, _| rng.random_range(-scale..scale))),
    }
}

/// Central differences of `f` for every scalar in `params`. Returns the
/// per-tensor norm-wise relative error against `analytic`, and the norm of
/// the finite-difference gradient.
pub fn finite_difference_errors(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let mut fd = vec![0.0; t.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let x = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x + step;
            let up = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x - step;
            let down = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic.get(name).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; t.len()]);
        let diff: f64 = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nf);
        let rel = if denom == 0.0 { 0.0 } else { diff / denom };
        out.push((name.clone(), rel, nf));
    }
    out
}

/// Minimizes ½xᵀΣx − δxᵀμ over (x, x₀) subject to x₀ + eᵀx = 1 by
/// projected gradient descent with Nesterov momentum; returns x.
pub fn projected_gradient_qp(cov: &DMatrix<f64>, mean: &DVector<f64>, delta: f64) -> DVector<f64> {
    let n = cov.nrows();
    let lip = cov.symmetric_eigenvalues().max();
    let project = |x: &DVector<f64>, x0: f64| {
        let shift = (x.sum() + x0 - 1.0) / (n as f64 + 1.0);
        (x.map(|v| v - shift), x0 - shift)
    };
    let (mut x, mut x0) = (DVector::zeros(n), 1.0);
    let (mut y, mut y0) = (x.clone(), x0);
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let grad = cov * &y - mean * delta;
        let (nx, nx0) = project(&(&y - grad / lip), y0);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        y = &nx + (&nx - &x) * mom;
        y0 = nx0 + (nx0 - x0) * mom;
        let moved = (&nx - &x).amax();
        x = nx;
        x0 = nx0;
        t = t_next;
        if moved < 1e-15 && (cov * &x - mean * delta).amax() < 1e-13 {
            break;
        }
    }
    x
}

/// (asset, shares, price, commission, borrow fee) per logged fill.
type LoggedFill = (usize, i64, f64, f64, f64);

/// Period-end values rebuilt from an order-log CSV and the raw price
/// matrix alone. Fees are recomputed from the replayed book and checked
/// against the logged ones.
#[allow(clippy::too_many_arguments)]
pub fn replay_order_log(
    log: &str,
    prices: &DMatrix<f64>,
    tickers: &[String],
    periods: std::ops::Range<usize>,
    days_per_period: usize,
    initial: f64,
    commission_rate: f64,
    cash_rate: f64,
    stock_rate: f64,
) -> Vec<f64> {
    let n = tickers.len();
    let mut rows: BTreeMap<usize, Vec<LoggedFill>> = BTreeMap::new();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let asset = tickers.iter().position(|t| t == f[1]).expect("known ticker");
        rows.entry(f[0].parse().unwrap()).or_default().push((
            asset,
            f[2].parse().unwrap(),
            f[3].parse().unwrap(),
            f[4].parse().unwrap(),
            f[5].parse().unwrap(),
        ));
    }
    let mut cash = initial;
    let mut q = vec![0i64; n];
    let mut out = Vec::new();
    for t in periods {
        let exec_day = t * days_per_period;
        let end_day = exec_day + days_per_period;
        let interest = if cash < 0.0 { -cash * cash_rate } else { 0.0 };
        let prev = q.clone();
        for i in 0..n {
            let p = prices[(exec_day, i)];
            let fee = stock_rate * (prev[i].min(0) as f64).abs() * p;
            cash -= fee;
            let logged = rows.get(&t).and_then(|r| r.iter().find(|x| x.0 == i));
            if let Some(&(_, d, price, comm, bfee)) = logged {
                assert_eq!(price, p, "exec price of asset {i} in period {t}");
                let expect_comm = commission_rate * (d as f64).abs() * p;
                assert!((comm - expect_comm).abs() <= 1e-12 * expect_comm.max(1.0));
                assert!((bfee - fee).abs() <= 1e-12 * fee.max(1.0));
                q[i] += d;
                cash -= d as f64 * p + expect_comm;
            } else {
                assert_eq!(fee, 0.0, "missing borrow fee line for asset {i} in period {t}");
            }
        }
        cash -= interest;
        out.push(cash + (0..n).map(|i| q[i] as f64 * prices[(end_day, i)]).sum::<f64>());
    }
    out
}
