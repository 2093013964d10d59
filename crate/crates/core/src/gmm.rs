//! Gaussian-mixture primitives kept in log space, plus the weighted
//! particle [`Ensemble`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::gaussian_log_density;

/// `log(sum(exp(values)))` via max-shift. Empty input is a contract error;
/// all `-inf` inputs give `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("log_sum_exp of an empty slice".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max.is_nan() || max == f64::INFINITY {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Shifts log-weights so they log-sum-exp to zero. Returns the shift.
pub fn normalize_log_weights(log_weights: &mut [f64]) -> Result<f64> {
    let total = log_sum_exp(log_weights)?;
    if !total.is_finite() {
        return Err(Error::DegenerateLikelihood);
    }
    for w in log_weights.iter_mut() {
        *w -= total;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `n x N`, one particle per column.
    pub particles: DMatrix<f64>,
    pub log_weights: Vec<f64>,
    pub time_index: usize,
}

impl Ensemble {
    /// Equally weighted ensemble.
    pub fn uniform(particles: DMatrix<f64>) -> Result<Self> {
        let count = particles.ncols();
        if count == 0 {
            return Err(Error::InsufficientEnsemble {
                required: 1,
                actual: 0,
            });
        }
        let lw = -(count as f64).ln();
        Self::new(particles, vec![lw; count])
    }

    pub fn new(particles: DMatrix<f64>, mut log_weights: Vec<f64>) -> Result<Self> {
        if particles.ncols() == 0 {
            return Err(Error::InsufficientEnsemble {
                required: 1,
                actual: 0,
            });
        }
        if log_weights.len() != particles.ncols() {
            return Err(Error::DimensionMismatch {
                expected: particles.ncols(),
                actual: log_weights.len(),
            });
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble particle".into()));
        }
        normalize_log_weights(&mut log_weights)?;
        Ok(Self {
            particles,
            log_weights,
            time_index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn particle(&self, j: usize) -> DVector<f64> {
        self.particles.column(j).into_owned()
    }

    /// Weighted mean of the particles.
    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for (j, lw) in self.log_weights.iter().enumerate() {
            mean.axpy(lw.exp(), &self.particles.column(j), 1.0);
        }
        mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub log_weights: Vec<f64>,
    /// `n x C`, one component mean per column.
    pub means: DMatrix<f64>,
    /// Lower Cholesky factors of the component covariances.
    pub factors: Vec<DMatrix<f64>>,
    /// `(particle, observation component)` origin of each component.
    pub provenance: Option<Vec<(usize, usize)>>,
}

impl GaussianMixture {
    pub fn new(
        mut log_weights: Vec<f64>,
        means: DMatrix<f64>,
        factors: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let c = log_weights.len();
        if c == 0 || means.ncols() != c || factors.len() != c {
            return Err(Error::Contract(
                "mixture needs matching, nonzero weight/mean/factor counts".into(),
            ));
        }
        let n = means.nrows();
        for f in &factors {
            if f.nrows() != n || f.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: f.nrows(),
                });
            }
            if f.diagonal().iter().any(|d| !(*d > 0.0)) {
                return Err(Error::Contract("covariance factor must have a positive diagonal".into()));
            }
        }
        normalize_log_weights(&mut log_weights)?;
        Ok(Self {
            log_weights,
            means,
            factors,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Vec<(usize, usize)>) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn component_mean(&self, c: usize) -> DVector<f64> {
        self.means.column(c).into_owned()
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for (c, lw) in self.log_weights.iter().enumerate() {
            mean.axpy(lw.exp(), &self.means.column(c), 1.0);
        }
        mean
    }

    /// Draws component indices by inverse CDF, one uniform per draw.
    pub fn sample_components<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<usize> {
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for lw in &self.log_weights {
            acc += lw.exp();
            cumulative.push(acc);
        }
        let last = self.len() - 1;
        (0..count)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                cumulative.partition_point(|&c| c <= u).min(last)
            })
            .collect()
    }
}

/// `log sum_c w_c N(x; m_c, L_c L_c^T)`.
pub fn mixture_log_density(gmm: &GaussianMixture, x: &DVector<f64>) -> Result<f64> {
    if x.len() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            actual: x.len(),
        });
    }
    let terms: Vec<f64> = (0..gmm.len())
        .map(|c| {
            gmm.log_weights[c]
                + gaussian_log_density(x, &gmm.means.column(c).into_owned(), &gmm.factors[c])
        })
        .collect();
    log_sum_exp(&terms)
}

/// Draws `count` samples (as columns) from the mixture.
pub fn mixture_sample<R: Rng + ?Sized>(
    gmm: &GaussianMixture,
    rng: &mut R,
    count: usize,
) -> DMatrix<f64> {
    let n = gmm.dim();
    let components = gmm.sample_components(rng, count);
    let mut out = DMatrix::zeros(n, count);
    let mut z = DVector::zeros(n);
    for (s, &c) in components.iter().enumerate() {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let draw = gmm.means.column(c) + &gmm.factors[c] * &z;
        out.set_column(s, &draw);
    }
    out
}
