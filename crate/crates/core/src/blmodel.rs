//! Black-Litterman algebra: sample covariance, equilibrium prior, view
//! blending and the unconstrained mean-variance solution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Ridge added to the sample covariance, relative to its mean variance.
pub const RIDGE: f64 = 1e-8;
/// Every Cholesky pivot must exceed this fraction of the largest one.
pub const PIVOT_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlError {
    #[error("need more than {needed} history rows for {assets} assets, have {rows}")]
    TooFewSamples {
        rows: usize,
        assets: usize,
        needed: usize,
    },
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error("risk aversion must be positive, got {0}")]
    BadDelta(f64),
    #[error("view confidence must be positive, got {0}")]
    BadTau(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalMoments {
    pub cov: DMatrix<f64>,
    pub sample_mean: DVector<f64>,
}

/// Sample covariance of the rows with divisor `rows - n - 1`, plus a small
/// ridge so the result always factors.
pub fn historical_cov(history: &DMatrix<f64>) -> Result<HistoricalMoments, BlError> {
    let (rows, n) = history.shape();
    if rows <= n + 1 {
        return Err(BlError::TooFewSamples {
            rows,
            assets: n,
            needed: n + 1,
        });
    }
    let mean = history.row_mean().transpose();
    let mut centered = history.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (rows - n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    add_ridge(&mut cov);
    Ok(HistoricalMoments {
        cov,
        sample_mean: mean,
    })
}

/// Σ ← Σ + 1e-8·tr(Σ)/n·I. A vanishing trace falls back to a scale of 1e-12.
pub fn add_ridge(cov: &mut DMatrix<f64>) {
    let n = cov.nrows();
    let scale = (cov.trace() / n as f64).max(1e-12);
    for i in 0..n {
        cov[(i, i)] += RIDGE * scale;
    }
}

/// Cholesky factor with the relative pivot check.
pub fn spd_factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, BlError> {
    let sym = (a + a.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or(BlError::SingularCovariance)?;
    let l = chol.l_dirty();
    let pivots: Vec<f64> = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    if pivots.iter().any(|&p| !(p > PIVOT_RTOL * max) || !p.is_finite()) {
        return Err(BlError::SingularCovariance);
    }
    Ok(chol)
}

pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, BlError> {
    Ok(spd_factor(a)?.solve(b))
}

/// Π = Σ e / (nδ): the return vector for which equal weights are optimal.
pub fn prior_mean(cov: &DMatrix<f64>, delta: f64) -> Result<DVector<f64>, BlError> {
    if !(delta > 0.0) {
        return Err(BlError::BadDelta(delta));
    }
    let n = cov.nrows();
    Ok(cov * DVector::from_element(n, 1.0 / (n as f64 * delta)))
}

/// Absolute views on every asset.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub pick: DMatrix<f64>,
    pub view_means: DVector<f64>,
    pub tau: f64,
    pub omega: DMatrix<f64>,
}

impl ViewSet {
    /// P = I, Ω = diag(τΣ).
    pub fn absolute(view_means: DVector<f64>, tau: f64, cov: &DMatrix<f64>) -> Result<Self, BlError> {
        if !(tau > 0.0) {
            return Err(BlError::BadTau(tau));
        }
        let n = cov.nrows();
        Ok(Self {
            pick: DMatrix::identity(n, n),
            view_means,
            tau,
            omega: DMatrix::from_diagonal(&(cov.diagonal() * tau)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior mean and covariance of returns given the views.
///
/// Evaluated in the equivalent gain form
/// `μ = Π + τΣPᵀ S⁻¹ (Q − PΠ)`, `A⁻¹ = τΣ − τΣPᵀ S⁻¹ PτΣ`, `S = PτΣPᵀ + Ω`,
/// which needs a single symmetric factorization.
pub fn posterior(
    moments: &HistoricalMoments,
    views: &ViewSet,
    prior: &DVector<f64>,
) -> Result<BlPosterior, BlError> {
    if !(views.tau > 0.0) {
        return Err(BlError::BadTau(views.tau));
    }
    let ts = &moments.cov * views.tau;
    let p = &views.pick;
    let tsp = &ts * p.transpose();
    let s = p * &tsp + &views.omega;
    let chol = spd_factor(&s)?;
    let innov = &views.view_means - p * prior;
    let mean = prior + &tsp * chol.solve(&innov);
    let a_inv = &ts - &tsp * chol.solve(&tsp.transpose());
    let mut cov = &moments.cov + a_inv;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(BlPosterior { mean, cov })
}

/// w = δ Σ⁻¹ μ over the risky assets and the cash remainder 1 − Σw.
pub fn closed_form_weights(post: &BlPosterior, delta: f64) -> Result<(DVector<f64>, f64), BlError> {
    if !(delta > 0.0) {
        return Err(BlError::BadDelta(delta));
    }
    let w = spd_solve(&post.cov, &post.mean)? * delta;
    let cash = 1.0 - w.sum();
    Ok((w, cash))
}

/// ½wᵀΣw − δwᵀμ, the problem the closed form minimizes.
pub fn mean_variance_objective(w: &DVector<f64>, post: &BlPosterior, delta: f64) -> f64 {
    0.5 * w.dot(&(&post.cov * w)) - delta * w.dot(&post.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(cov: DMatrix<f64>) -> HistoricalMoments {
        let n = cov.nrows();
        HistoricalMoments {
            cov,
            sample_mean: DVector::zeros(n),
        }
    }

    #[test]
    fn degenerate_sample_is_pure_ridge() {
        let h = DMatrix::from_fn(6, 2, |_, j| [0.01, -0.02][j]);
        let m = historical_cov(&h).unwrap();
        assert!(m.cov[(0, 1)].abs() < 1e-30);
        assert!(m.cov[(0, 0)] > 0.0);
        assert!(spd_factor(&m.cov).is_ok());
    }

    #[test]
    fn too_few_rows() {
        let h = DMatrix::zeros(4, 3);
        assert!(matches!(historical_cov(&h), Err(BlError::TooFewSamples { .. })));
    }

    #[test]
    fn prior_examples() {
        let p = prior_mean(&DMatrix::identity(4, 4), 0.25).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let p = prior_mean(&DMatrix::identity(4, 4), 1e300).unwrap();
        assert!(p.norm() < 1e-299);
        assert!(prior_mean(&DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn identity_closed_form() {
        let post = BlPosterior {
            mean: DVector::from_vec(vec![0.1, -0.2]),
            cov: DMatrix::identity(2, 2),
        };
        let (w, c) = closed_form_weights(&post, 1.0).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-15 && (w[1] + 0.2).abs() < 1e-15);
        assert!((c - 1.1).abs() < 1e-15);
        let zero = BlPosterior {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        let (w, c) = closed_form_weights(&zero, 3.0).unwrap();
        assert_eq!(w.norm(), 0.0);
        assert_eq!(c, 1.0);
    }

    #[test]
    fn agreeing_views_fix_mean() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.4, 0.1, 0.4, 1.0, -0.2, 0.1, -0.2, 1.5]);
        let prior = prior_mean(&cov, 0.7).unwrap();
        let views = ViewSet::absolute(prior.clone(), 1.0, &cov).unwrap();
        let post = posterior(&moments(cov), &views, &prior).unwrap();
        assert!((post.mean - prior).amax() < 1e-12);
    }

    #[test]
    fn diagonal_case_averages() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0, 0.1]));
        let prior = DVector::from_vec(vec![0.01, -0.02, 0.03]);
        let q = DVector::from_vec(vec![0.05, 0.0, -0.01]);
        let views = ViewSet::absolute(q.clone(), 1.0, &cov).unwrap();
        let post = posterior(&moments(cov), &views, &prior).unwrap();
        for i in 0..3 {
            assert!((post.mean[i] - 0.5 * (prior[i] + q[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_posterior_reported() {
        let post = BlPosterior {
            mean: DVector::from_vec(vec![1.0, 1.0]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        };
        assert_eq!(closed_form_weights(&post, 1.0), Err(BlError::SingularCovariance));
    }
}
