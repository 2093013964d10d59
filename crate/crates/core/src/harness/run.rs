//! Single filter trajectories against a twin truth.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapt::{aengmf_step, EmConfig};
use crate::baselines::{enkf_step, sir_step};
use crate::covparam::{
    assemble_from_basis, localization_weights, rblw_shrinkage, silverman_bandwidth, CovarianceBasis,
    KernelFamily, PhysicalParams, Theta,
};
use crate::dynamics::{ModelSpec, ObservationModel};
use crate::engmf::{engmf_analysis, gmm_resample, posterior_mean};
use crate::error::{Error, Result};
use crate::gmm::Ensemble;

use super::config::{ExperimentConfig, FilterSpec, Method};
use super::stream_rng;
use super::twin::{generate_twin_data, TwinData};

/// Root-mean-square error over all components and the cycles after `spinup`.
/// Returns `None` if any scored mean is non-finite.
pub fn spatiotemporal_rmse(means: &DMatrix<f64>, truth: &DMatrix<f64>, spinup: usize) -> Result<Option<f64>> {
    if means.shape() != truth.shape() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: means.len(),
        });
    }
    if spinup >= truth.ncols() {
        return Err(Error::Contract(format!(
            "spinup {spinup} leaves no cycles out of {}",
            truth.ncols()
        )));
    }
    let scored = means.columns_range(spinup..);
    if scored.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let sq: f64 = scored
        .iter()
        .zip(truth.columns_range(spinup..).iter())
        .map(|(m, t)| (m - t).powi(2))
        .sum();
    Ok(Some((sq / scored.len() as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub particles: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    /// Mean kernel `beta^2` over the scored cycles (mixture filters only).
    pub mean_beta2: Option<f64>,
    /// Mean shrinkage weight or radius over the scored cycles.
    pub mean_aux: Option<f64>,
    pub wall_seconds: f64,
    pub diverged: bool,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
}

/// Per-run filter state.
enum Filter {
    Mixture {
        family: KernelFamily,
        spec: FilterSpec,
        em: Option<EmConfig>,
        theta: Option<Theta>,
    },
    Enkf {
        taper: Option<DMatrix<f64>>,
    },
    Sir {
        rejuvenation: f64,
    },
}

struct CycleOutput {
    ensemble: Ensemble,
    mean: DVector<f64>,
    params: Option<PhysicalParams>,
}

/// Kernel parameters from the rule-of-thumb settings in `spec`.
fn heuristic_theta(family: &KernelFamily, spec: &FilterSpec, basis: &CovarianceBasis) -> Result<Theta> {
    let beta2 = spec.scale * silverman_bandwidth(basis.members, basis.dim());
    let aux = match family {
        KernelFamily::Bandwidth => None,
        KernelFamily::Shrinkage => Some(match spec.gamma {
            Some(g) => g,
            None => {
                let p = &basis.empirical;
                rblw_shrinkage(p, &DMatrix::from_diagonal(&p.diagonal()), basis.members)?
            }
        }),
        KernelFamily::Localized { .. } => spec.radius,
    };
    Theta::from_physical(family, PhysicalParams { beta2, aux })
}

impl Filter {
    fn new(cfg: &ExperimentConfig, spec: &FilterSpec, members: usize, model: &ModelSpec) -> Result<Self> {
        Ok(match spec.method {
            Method::Aengmf | Method::Engmf => Filter::Mixture {
                family: cfg.kernel_family(spec)?,
                spec: spec.clone(),
                em: match spec.method {
                    Method::Aengmf => Some(cfg.em_config(members)?),
                    _ => None,
                },
                theta: None,
            },
            Method::Enkf => Filter::Enkf { taper: None },
            Method::Lenkf => Filter::Enkf {
                taper: Some(localization_weights(
                    &model.cyclic_distances(),
                    spec.radius.expect("validated"),
                )?),
            },
            Method::Sir => Filter::Sir {
                rejuvenation: spec.rejuvenation,
            },
        })
    }

    fn cycle<R: Rng + ?Sized>(
        &mut self,
        ens: &Ensemble,
        obs: &ObservationModel,
        y: &DVector<f64>,
        rng: &mut R,
    ) -> Result<CycleOutput> {
        match self {
            Filter::Mixture {
                family,
                spec,
                em,
                theta,
            } => {
                let basis = CovarianceBasis::new(ens)?;
                match em {
                    Some(em) => {
                        let start = match theta.take() {
                            Some(t) => t,
                            None => heuristic_theta(family, spec, &basis)?,
                        };
                        let step = aengmf_step(ens, obs, y, family, &start, em, rng)?;
                        let params = step.theta.physical(family);
                        *theta = Some(step.theta);
                        Ok(CycleOutput {
                            mean: posterior_mean(&step.analysis),
                            ensemble: step.ensemble,
                            params: Some(params),
                        })
                    }
                    None => {
                        let t = heuristic_theta(family, spec, &basis)?;
                        let kernel = assemble_from_basis(family, &t, &basis)?;
                        let analysis = engmf_analysis(ens, &kernel, obs, y)?;
                        Ok(CycleOutput {
                            mean: posterior_mean(&analysis),
                            ensemble: gmm_resample(&analysis, rng, ens.len())?,
                            params: Some(t.physical(family)),
                        })
                    }
                }
            }
            Filter::Enkf { taper } => {
                let ensemble = enkf_step(ens, obs, y, rng, taper.as_ref())?;
                Ok(CycleOutput {
                    mean: ensemble.mean(),
                    ensemble,
                    params: None,
                })
            }
            Filter::Sir { rejuvenation } => {
                let ensemble = sir_step(ens, obs, y, rng, *rejuvenation)?;
                Ok(CycleOutput {
                    mean: ensemble.mean(),
                    ensemble,
                    params: None,
                })
            }
        }
    }
}

/// Truth and observations for `seed`; shared by every filter in a sweep.
pub fn twin_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TwinData> {
    let model = cfg.model_spec()?;
    let obs = cfg.observation_model()?;
    generate_twin_data(&model, &obs, cfg.experiment.steps, &mut stream_rng("truth", seed, 0))
}

pub fn run_filter_trajectory(cfg: &ExperimentConfig, filter: &str, members: usize, seed: u64) -> Result<RunRecord> {
    let data = twin_for_seed(cfg, seed)?;
    run_with_twin(cfg, filter, members, seed, &data)
}

/// Runs one filter over precomputed twin data. Configuration problems are
/// errors; numerical breakdowns during the run are reported in the record.
pub fn run_with_twin(
    cfg: &ExperimentConfig,
    filter: &str,
    members: usize,
    seed: u64,
    data: &TwinData,
) -> Result<RunRecord> {
    let spec = cfg.filter_spec(filter)?;
    if members < 2 {
        return Err(Error::InsufficientEnsemble {
            required: 2,
            actual: members,
        });
    }
    let model = cfg.model_spec()?;
    let obs = cfg.observation_model()?;
    let started = Instant::now();
    let mut state = Filter::new(cfg, spec, members, &model)?;

    let n = model.dimension();
    let mut init_rng = stream_rng("ensemble", seed, members);
    let initial = DMatrix::from_fn(n, members, |i, _| {
        data.initial[i] + init_rng.sample::<f64, _>(StandardNormal)
    });
    let mut rng = stream_rng(filter, seed, members);
    let spinup = cfg.experiment.spinup;

    let outcome = (|| -> Result<(DMatrix<f64>, Vec<PhysicalParams>)> {
        let mut ens = Ensemble::uniform(initial)?;
        let steps = data.truth.ncols();
        let mut means = DMatrix::zeros(n, steps);
        let mut params = Vec::new();
        for (i, y) in data.observations.iter().enumerate() {
            model.propagate_ensemble(&mut ens.particles)?;
            let out = state.cycle(&ens, &obs, y, &mut rng)?;
            if out.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("posterior mean".into()));
            }
            means.set_column(i, &out.mean);
            if i >= spinup {
                params.extend(out.params);
            }
            ens = out.ensemble;
        }
        Ok((means, params))
    })();

    let mut record = RunRecord {
        method: filter.to_string(),
        particles: members,
        seed,
        rmse: None,
        mean_beta2: None,
        mean_aux: None,
        wall_seconds: 0.0,
        diverged: true,
        failure: None,
    };
    match outcome {
        Ok((means, params)) => {
            record.rmse = spatiotemporal_rmse(&means, &data.truth, spinup)?;
            record.diverged = record.rmse.is_none();
            if !params.is_empty() {
                let k = params.len() as f64;
                record.mean_beta2 = Some(params.iter().map(|p| p.beta2).sum::<f64>() / k);
                let aux: Vec<f64> = params.iter().filter_map(|p| p.aux).collect();
                if !aux.is_empty() {
                    record.mean_aux = Some(aux.iter().sum::<f64>() / aux.len() as f64);
                }
            }
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}
