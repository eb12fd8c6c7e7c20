//! Dense Cholesky helpers on row-major buffers.

use crate::{GradError, Result};

/// Relative pivot floor: every pivot must exceed this fraction of the largest.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor of the symmetric matrix `a` (`n x n`,
/// row-major). Only the lower triangle of `a` is read.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(GradError::NotPositiveDefinite { row: j, pivot: d });
        }
        pivots.push(d);
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    for (row, &p) in pivots.iter().enumerate() {
        if p <= PIVOT_RTOL * max {
            return Err(GradError::NotPositiveDefinite { row, pivot: p });
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` in place, `B` is `n x k` row-major.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], k: usize) {
    debug_assert_eq!(b.len(), n * k);
    for c in 0..k {
        // forward: L y = b
        for i in 0..n {
            let mut s = b[i * k + c];
            for j in 0..i {
                s -= l[i * n + j] * b[j * k + c];
            }
            b[i * k + c] = s / l[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = b[i * k + c];
            for j in (i + 1)..n {
                s -= l[j * n + i] * b[j * k + c];
            }
            b[i * k + c] = s / l[i * n + i];
        }
    }
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &[f64], n: usize, b: &[f64], k: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut x = b.to_vec();
    cholesky_solve(&l, n, &mut x, k);
    Ok(x)
}
