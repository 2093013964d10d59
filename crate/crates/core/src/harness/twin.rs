//! Synthetic truth trajectories and their observations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{l63_critical_point, ModelKind, ModelSpec, ObservationModel};
use crate::error::{Error, Result};

/// Burn-in length in assimilation intervals.
pub const BURN_IN_INTERVALS: usize = 500;
const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TwinData {
    /// Truth at the start of the first cycle (after burn-in).
    pub initial: DVector<f64>,
    /// `n x T`; column `i` is the truth observed at cycle `i`.
    pub truth: DMatrix<f64>,
    pub observations: Vec<DVector<f64>>,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws `H(x) + eta` with `eta` from the observation-error mixture.
pub fn observe<R: Rng + ?Sized>(obs: &ObservationModel, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let c = if obs.noise.len() == 1 {
        &obs.noise[0]
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        obs.noise
            .iter()
            .find(|c| {
                acc += c.weight;
                u < acc
            })
            .unwrap_or(&obs.noise[obs.noise.len() - 1])
    };
    obs.apply(x) + &c.offset + &c.factor * standard_normal(rng, c.offset.len())
}

fn starting_point<R: Rng + ?Sized>(model: &ModelSpec, rng: &mut R) -> DVector<f64> {
    let n = model.dimension();
    match model.kind {
        ModelKind::Lorenz63 { .. } => DVector::from_row_slice(&l63_critical_point()) + standard_normal(rng, n),
        ModelKind::Lorenz96 { forcing, .. } => {
            DVector::from_element(n, forcing) + standard_normal(rng, n) * 0.01
        }
    }
}

pub fn generate_twin_data<R: Rng + ?Sized>(
    model: &ModelSpec,
    obs: &ObservationModel,
    steps: usize,
    rng: &mut R,
) -> Result<TwinData> {
    if steps == 0 {
        return Err(Error::Contract("twin experiment needs at least one cycle".into()));
    }
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut x = starting_point(model, rng);
        match model.integrate_in_place(x.as_mut_slice(), BURN_IN_INTERVALS as f64 * model.interval) {
            Ok(()) => return record(model, obs, x, steps, rng),
            Err(e @ Error::Divergence { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn record<R: Rng + ?Sized>(
    model: &ModelSpec,
    obs: &ObservationModel,
    initial: DVector<f64>,
    steps: usize,
    rng: &mut R,
) -> Result<TwinData> {
    let n = model.dimension();
    let mut truth = DMatrix::zeros(n, steps);
    let mut observations = Vec::with_capacity(steps);
    let mut x = initial.clone();
    for i in 0..steps {
        model.integrate_in_place(x.as_mut_slice(), model.interval)?;
        truth.set_column(i, &x);
        observations.push(observe(obs, &x, rng));
    }
    Ok(TwinData {
        initial,
        truth,
        observations,
    })
}
