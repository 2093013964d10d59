//! Reference filters: the stochastic (perturbed-observation) EnKF with
//! optional covariance tapering, and the bootstrap SIR particle filter.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::ObservationModel;
use crate::error::{Error, Result};
use crate::gmm::{normalize_log_weights, Ensemble};
use crate::linalg::{symmetrize, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineConfig {
    Enkf,
    /// EnKF with the empirical covariance tapered at radius `radius`.
    Lenkf { radius: f64 },
    /// Resamples every step, then optionally jitters each particle with
    /// `N(0, rejuvenation^2 I)`.
    Sir { rejuvenation: f64 },
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Perturbed-observation EnKF analysis with the gain built from ensemble
/// anomalies of `x` and `H(x)`. `localization` is an optional Schur taper on
/// both covariances; it needs one observation per state component.
pub fn enkf_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
    localization: Option<&DMatrix<f64>>,
) -> Result<Ensemble> {
    let noise = obs.single_component()?;
    let count = ens.len();
    if count < 2 {
        return Err(Error::InsufficientEnsemble {
            required: 2,
            actual: count,
        });
    }
    let m = y.len();
    let mut hx = DMatrix::zeros(m, count);
    for j in 0..count {
        hx.set_column(j, &obs.apply(&ens.particle(j)));
    }
    let scale = 1.0 / (count as f64 - 1.0);
    let dx = centered(&ens.particles);
    let dy = centered(&hx);
    let mut pxy = &dx * dy.transpose() * scale;
    let mut pyy = &dy * dy.transpose() * scale;
    if let Some(rho) = localization {
        if rho.shape() != pxy.shape() || rho.shape() != pyy.shape() {
            return Err(Error::DimensionMismatch {
                expected: rho.nrows(),
                actual: m,
            });
        }
        pxy.component_mul_assign(rho);
        pyy.component_mul_assign(rho);
    }
    let mut s = pyy + &noise.covariance;
    symmetrize(&mut s);
    let chol = Cholesky::new(s).ok_or(Error::ObservationDegeneracy)?;
    // K^T = S^{-1} Pyx
    let gain = chol.solve(&pxy.transpose()).transpose();

    let mut out = ens.particles.clone();
    for j in 0..count {
        let perturbed = y + &noise.offset + &noise.factor * standard_normal(rng, m);
        let update = &gain * (perturbed - hx.column(j));
        let mut col = out.column_mut(j);
        col += update;
    }
    let mut next = Ensemble::uniform(out)?;
    next.time_index = ens.time_index + 1;
    Ok(next)
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.column_sum() / x.ncols() as f64;
    let mut d = x.clone();
    for mut col in d.column_iter_mut() {
        col -= &mean;
    }
    d
}

/// Importance weights `log u_j + log N(y; H(x_j), R)`, normalized.
pub fn sir_log_weights(ens: &Ensemble, obs: &ObservationModel, y: &DVector<f64>) -> Result<Vec<f64>> {
    let noise = obs.single_component()?;
    let half_log_det: f64 = noise.factor.diagonal().iter().map(|d| d.ln()).sum();
    let m = y.len() as f64;
    let mut lw: Vec<f64> = (0..ens.len())
        .map(|j| {
            let resid = y + &noise.offset - obs.apply(&ens.particle(j));
            let z = noise
                .factor
                .solve_lower_triangular(&resid)
                .expect("observation factor has a positive diagonal");
            ens.log_weights[j] - 0.5 * z.norm_squared() - half_log_det - 0.5 * m * LN_2PI
        })
        .collect();
    normalize_log_weights(&mut lw)?;
    Ok(lw)
}

/// Systematic resampling: returns the selected index for each of `count` slots.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, count: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let stride = total / count as f64;
    let start = rng.random::<f64>() * stride;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    let mut acc = weights[0];
    for i in 0..count {
        let u = start + i as f64 * stride;
        while u >= acc && j + 1 < weights.len() {
            j += 1;
            acc += weights[j];
        }
        out.push(j);
    }
    out
}

/// Bootstrap SIR step: weight, resample, optionally rejuvenate.
pub fn sir_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
    rejuvenation: f64,
) -> Result<Ensemble> {
    let lw = sir_log_weights(ens, obs, y)?;
    let weights: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
    let picks = systematic_resample(&weights, rng, ens.len());
    let n = ens.dim();
    let mut out = DMatrix::zeros(n, ens.len());
    for (slot, &j) in picks.iter().enumerate() {
        out.set_column(slot, &ens.particles.column(j));
    }
    if rejuvenation > 0.0 {
        for v in out.iter_mut() {
            *v += rejuvenation * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut next = Ensemble::uniform(out)?;
    next.time_index = ens.time_index + 1;
    Ok(next)
}
