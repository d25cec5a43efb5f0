use nalgebra::{DMatrix, DVector};

use super::RngStream;
use crate::error::{Error, Result};

/// Relative jitter applied by [`condition_covariance`], as a fraction of the mean diagonal.
const JITTER_REL: f64 = 1e-9;
/// Absolute floor so an all-zero matrix still becomes positive definite.
const JITTER_FLOOR: f64 = 1e-12;

/// Lower-triangular `L` with `L Lᵀ = p`.
pub fn cholesky(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !p.is_square() {
        return Err(Error::Dimension {
            expected: p.nrows(),
            got: p.ncols(),
        });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    p.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite)
}

/// `(p + pᵀ)/2 + eps·I`.
pub fn symmetrize_jitter(p: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let mut out = (p + p.transpose()) * 0.5;
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += eps;
    }
    out
}

/// Default jitter for `p`: `1e-9` times the mean diagonal, floored at `1e-12`.
pub fn default_jitter(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows().min(p.ncols());
    if n == 0 {
        return JITTER_FLOOR;
    }
    let mean_diag = p.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    (JITTER_REL * mean_diag).max(JITTER_FLOOR)
}

/// Symmetrize with the default jitter.
pub fn condition_covariance(p: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize_jitter(p, default_jitter(p))
}

/// Cholesky factor, retrying once on the conditioned matrix.
pub fn cholesky_with_retry(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cholesky(p).or_else(|_| cholesky(&condition_covariance(p)))
}

/// Solve `s x = b` for symmetric positive-definite `s` (one jitter retry).
pub fn solve_spd(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = s
        .clone()
        .cholesky()
        .or_else(|| condition_covariance(s).cholesky())
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

pub fn is_symmetric(p: &DMatrix<f64>, tol: f64) -> bool {
    p.is_square()
        && (0..p.nrows()).all(|i| (0..i).all(|j| (p[(i, j)] - p[(j, i)]).abs() <= tol))
}

/// Draw from `N(mean, cov)` as `mean + L z`.
///
/// An all-zero diagonal returns `mean` exactly without factorizing.
pub fn gaussian_sample(
    rng: &mut RngStream,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::Dimension {
            expected: mean.len(),
            got: cov.nrows(),
        });
    }
    if cov.diagonal().iter().all(|&v| v == 0.0) {
        return Ok(mean.clone());
    }
    let l = cholesky(cov)?;
    Ok(gaussian_sample_with_factor(rng, mean, &l))
}

/// Draw from `N(mean, L Lᵀ)` given a precomputed factor `L`.
pub fn gaussian_sample_with_factor(
    rng: &mut RngStream,
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.normal());
    mean + l * z
}
