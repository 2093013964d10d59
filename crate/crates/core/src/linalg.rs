//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter levels, relative to the mean diagonal, tried when a plain
/// Cholesky factorization fails.
pub const JITTER_LEVELS: [f64; 2] = [1e-10, 1e-8];

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Cholesky factorization with the jitter escalation policy. Returns the
/// factored matrix (possibly jittered) and its lower factor.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Option<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Some((matrix.clone(), chol));
    }
    let n = matrix.nrows();
    let scale = matrix.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    for eps in JITTER_LEVELS {
        let mut jittered = matrix.clone();
        for i in 0..n {
            jittered[(i, i)] += eps * scale;
        }
        if let Some(chol) = Cholesky::new(jittered.clone()) {
            return Some((jittered, chol));
        }
    }
    None
}

/// log|A| from a lower Cholesky factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian log-density of `x` given mean and lower factor of the covariance.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, factor: &DMatrix<f64>) -> f64 {
    let diff = x - mean;
    let z = factor
        .solve_lower_triangular(&diff)
        .expect("factor has a positive diagonal");
    let half_log_det: f64 = factor.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * z.norm_squared() - half_log_det - 0.5 * diff.len() as f64 * LN_2PI
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
