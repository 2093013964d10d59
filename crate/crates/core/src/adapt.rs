//! Adaptive EnGMF: kernel parameters are refitted at every assimilation
//! step by expectation maximization. Each M-step runs a few iterations of
//! sub-sampled Newton ascent on a Monte Carlo estimate of
//!
//! ```text
//! L(theta) = E_{x ~ posterior(theta_m)} [ log p(x | theta) ] + log p(theta)
//! ```
//!
//! where `p(x | theta)` is the prior kernel mixture centred on the
//! ensemble. Gradients are analytic; the Hessian is a central finite
//! difference of the analytic gradient on an independent batch.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::covparam::{
    assemble_from_basis, log_parameter_prior, silverman_bandwidth, AssembledKernel, CovarianceBasis,
    KernelFamily, PhysicalParams, Theta,
};
use crate::dynamics::ObservationModel;
use crate::engmf::{engmf_analysis, gmm_resample, AnalysisResult};
use crate::error::{Error, Result};
use crate::gmm::{mixture_sample, Ensemble};
use crate::linalg::LN_2PI;

/// Finite-difference step in `zeta` for the Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// EM outer iterations; zero disables adaptation.
    pub outer: usize,
    /// Newton iterations per M-step.
    pub inner: usize,
    /// Samples per gradient batch (and again per Hessian batch).
    pub batch: usize,
    pub alpha: f64,
    /// Cap on the `zeta`-space step norm.
    pub clip: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            outer: 5,
            inner: 1,
            batch: 100,
            alpha: 1.0,
            clip: 1.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner < 1 || self.batch < 2 || !(self.alpha > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config(format!(
                "invalid EM settings (need inner >= 1, batch >= 2, alpha > 0, clip > 0): {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// `zeta` after every Newton iteration, starting with the initial value.
    pub trajectory: Vec<Vec<f64>>,
    /// Gradient-batch loss estimate at the start of each iteration.
    pub losses: Vec<f64>,
    pub step_norms: Vec<f64>,
    /// Iterations where the Hessian was not negative definite.
    pub gradient_fallbacks: usize,
    pub clipped_steps: usize,
    /// The fit stopped at a non-finite loss or gradient.
    pub aborted: bool,
    /// The step was retried from default parameters after a singular kernel.
    pub reset_to_default: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Monte Carlo loss over a fixed batch of posterior samples.
pub struct BatchLoss<'a> {
    family: &'a KernelFamily,
    basis: &'a CovarianceBasis,
    ens: &'a Ensemble,
    batch: &'a DMatrix<f64>,
    /// For the bandwidth family: `d^T P^{-1} d` per (sample, member), so
    /// re-evaluating at a new `beta^2` costs only scalar work.
    bandwidth_forms: Option<(DMatrix<f64>, f64)>,
}

impl<'a> BatchLoss<'a> {
    pub fn new(
        family: &'a KernelFamily,
        basis: &'a CovarianceBasis,
        ens: &'a Ensemble,
        batch: &'a DMatrix<f64>,
    ) -> Result<Self> {
        let mut loss = Self::generic(family, basis, ens, batch)?;
        if matches!(family, KernelFamily::Bandwidth) {
            let unit = assemble_from_basis(family, &Theta::bandwidth(1.0)?, basis)?;
            loss.bandwidth_forms = Some((mahalanobis_table(&unit, ens, batch), unit.log_det));
        }
        Ok(loss)
    }

    /// Same loss without family-specific shortcuts.
    pub fn generic(
        family: &'a KernelFamily,
        basis: &'a CovarianceBasis,
        ens: &'a Ensemble,
        batch: &'a DMatrix<f64>,
    ) -> Result<Self> {
        if batch.nrows() != ens.dim() {
            return Err(Error::DimensionMismatch {
                expected: ens.dim(),
                actual: batch.nrows(),
            });
        }
        if batch.ncols() == 0 {
            return Err(Error::Contract("empty sample batch".into()));
        }
        Ok(Self {
            family,
            basis,
            ens,
            batch,
            bandwidth_forms: None,
        })
    }

    pub fn evaluate(&self, theta: &Theta) -> Result<LossEvaluation> {
        let (mut value, mut gradient) = match &self.bandwidth_forms {
            Some((forms, unit_log_det)) => self.bandwidth_likelihood(theta, forms, *unit_log_det),
            None => self.generic_likelihood(theta)?,
        };
        let (prior, prior_grad) =
            log_parameter_prior(self.family, theta, self.ens.len(), self.ens.dim());
        value += prior;
        for (g, p) in gradient.iter_mut().zip(prior_grad) {
            *g += p;
        }
        Ok(LossEvaluation { value, gradient })
    }

    pub fn value(&self, theta: &Theta) -> Result<f64> {
        Ok(self.evaluate(theta)?.value)
    }

    /// Component responsibilities of each sample (rows) under the prior
    /// mixture at `theta`.
    pub fn responsibilities(&self, theta: &Theta) -> Result<DMatrix<f64>> {
        let kernel = assemble_from_basis(self.family, theta, self.basis)?;
        let table = mahalanobis_table(&kernel, self.ens, self.batch);
        let offset = -0.5 * kernel.log_det;
        let mut out = DMatrix::zeros(self.batch.ncols(), self.ens.len());
        let mut logc = vec![0.0; self.ens.len()];
        for s in 0..self.batch.ncols() {
            for (j, l) in logc.iter_mut().enumerate() {
                *l = self.ens.log_weights[j] - 0.5 * table[(s, j)] + offset;
            }
            let lse = lse_in_place(&mut logc);
            for j in 0..self.ens.len() {
                out[(s, j)] = (logc[j] - lse).exp();
            }
        }
        Ok(out)
    }

    fn bandwidth_likelihood(&self, theta: &Theta, forms: &DMatrix<f64>, unit_log_det: f64) -> (f64, Vec<f64>) {
        let n = self.ens.dim() as f64;
        let beta2 = theta.beta2();
        let dbeta2 = 4.0 * theta.zeta[0].powi(3);
        let constant = -0.5 * (n * beta2.ln() + unit_log_det) - 0.5 * n * LN_2PI;
        let samples = self.batch.ncols();
        let mut logc = vec![0.0; self.ens.len()];
        let (mut total, mut grad) = (0.0, 0.0);
        for s in 0..samples {
            for (j, l) in logc.iter_mut().enumerate() {
                *l = self.ens.log_weights[j] - 0.5 * forms[(s, j)] / beta2;
            }
            let lse = lse_in_place(&mut logc);
            total += lse + constant;
            let mut expected_q = 0.0;
            for (j, l) in logc.iter().enumerate() {
                expected_q += (l - lse).exp() * forms[(s, j)];
            }
            grad += -0.5 * n / beta2 + 0.5 * expected_q / (beta2 * beta2);
        }
        let k = samples as f64;
        (total / k, vec![grad / k * dbeta2])
    }

    fn generic_likelihood(&self, theta: &Theta) -> Result<(f64, Vec<f64>)> {
        let kernel = assemble_from_basis(self.family, theta, self.basis)?;
        let n = self.ens.dim();
        let members = self.ens.len();
        let params = kernel.db_dzeta.len();
        let inv = kernel.inverse();
        let trace_terms: Vec<f64> = kernel
            .db_dzeta
            .iter()
            .map(|d| -0.5 * inv.component_mul(d).sum())
            .collect();
        let constant = -0.5 * kernel.log_det - 0.5 * n as f64 * LN_2PI;

        let mut total = 0.0;
        let mut grad = vec![0.0; params];
        let mut logc = vec![0.0; members];
        let mut whitened: Vec<DVector<f64>> = vec![DVector::zeros(n); members];
        let mut diff = DVector::zeros(n);
        let mut tmp = DVector::zeros(n);
        for s in 0..self.batch.ncols() {
            let x = self.batch.column(s);
            for j in 0..members {
                diff.copy_from(&x);
                diff -= self.ens.particles.column(j);
                whitened[j].gemv(1.0, &inv, &diff, 0.0);
                logc[j] = self.ens.log_weights[j] - 0.5 * diff.dot(&whitened[j]);
            }
            let lse = lse_in_place(&mut logc);
            total += lse + constant;
            for j in 0..members {
                let resp = (logc[j] - lse).exp();
                if resp == 0.0 {
                    continue;
                }
                for (k, d) in kernel.db_dzeta.iter().enumerate() {
                    tmp.gemv(1.0, d, &whitened[j], 0.0);
                    grad[k] += resp * 0.5 * whitened[j].dot(&tmp);
                }
            }
        }
        let count = self.batch.ncols() as f64;
        for (g, t) in grad.iter_mut().zip(&trace_terms) {
            *g = *g / count + t;
        }
        Ok((total / count, grad))
    }
}

fn lse_in_place(values: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(x_s - x_j)^T B^{-1} (x_s - x_j)` for every sample `s` (row) and member `j`.
fn mahalanobis_table(kernel: &AssembledKernel, ens: &Ensemble, batch: &DMatrix<f64>) -> DMatrix<f64> {
    let n = ens.dim();
    let l = &kernel.factor;
    // Whiten both point sets once: z = L^{-1} x.
    let wb = l.solve_lower_triangular(batch).expect("positive diagonal");
    let we = l.solve_lower_triangular(&ens.particles).expect("positive diagonal");
    let mut out = DMatrix::zeros(batch.ncols(), ens.len());
    for j in 0..ens.len() {
        let e = we.column(j);
        for s in 0..batch.ncols() {
            let b = wb.column(s);
            let mut q = 0.0;
            for i in 0..n {
                let d = b[i] - e[i];
                q += d * d;
            }
            out[(s, j)] = q;
        }
    }
    out
}

/// Analytic gradient on `grad_batch` and finite-difference Hessian of the
/// analytic gradient on the independent `hess_batch`.
pub fn mc_loss_derivatives(
    theta: &Theta,
    grad_batch: &DMatrix<f64>,
    hess_batch: &DMatrix<f64>,
    family: &KernelFamily,
    ens: &Ensemble,
) -> Result<(LossEvaluation, DMatrix<f64>)> {
    let basis = CovarianceBasis::new(ens)?;
    derivatives_with_basis(theta, grad_batch, hess_batch, family, ens, &basis)
}

fn derivatives_with_basis(
    theta: &Theta,
    grad_batch: &DMatrix<f64>,
    hess_batch: &DMatrix<f64>,
    family: &KernelFamily,
    ens: &Ensemble,
    basis: &CovarianceBasis,
) -> Result<(LossEvaluation, DMatrix<f64>)> {
    let eval = BatchLoss::new(family, basis, ens, grad_batch)?.evaluate(theta)?;
    let hess_loss = BatchLoss::new(family, basis, ens, hess_batch)?;
    let hessian = finite_difference_hessian(theta, |t| Ok(hess_loss.evaluate(t)?.gradient))?;
    Ok((eval, hessian))
}

pub fn finite_difference_hessian<F>(theta: &Theta, mut gradient: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&Theta) -> Result<Vec<f64>>,
{
    let k = theta.zeta.len();
    let mut h = DMatrix::zeros(k, k);
    for c in 0..k {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up.zeta[c] += HESSIAN_STEP;
        dn.zeta[c] -= HESSIAN_STEP;
        let gu = gradient(&up)?;
        let gd = gradient(&dn)?;
        for r in 0..k {
            h[(r, c)] = (gu[r] - gd[r]) / (2.0 * HESSIAN_STEP);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonStep {
    pub step: Vec<f64>,
    pub fallback: bool,
    pub clipped: bool,
}

/// Ascent step for a maximization: `-alpha H^{-1} g` when `H` is negative
/// definite, otherwise `alpha g`; the result is clipped to norm `clip`.
pub fn newton_ascent_step(gradient: &[f64], hessian: &DMatrix<f64>, alpha: f64, clip: f64) -> NewtonStep {
    let g = DVector::from_column_slice(gradient);
    let (mut step, fallback) = match Cholesky::new(-hessian.clone()) {
        Some(neg) => (neg.solve(&g) * alpha, false),
        None => (g * alpha, true),
    };
    let norm = step.norm();
    let clipped = norm > clip;
    if clipped {
        step *= clip / norm;
    }
    NewtonStep {
        step: step.as_slice().to_vec(),
        fallback,
        clipped,
    }
}

/// Source of stochastic gradient/Hessian estimates for the inner loop.
pub trait StochasticObjective {
    fn derivatives(&mut self, theta: &Theta) -> Result<(LossEvaluation, DMatrix<f64>)>;
}

/// `iterations` sub-sampled Newton ascent steps from `theta`, appending to
/// `diag`. Returns `false` if the fit was aborted on a non-finite estimate.
pub fn subsampled_newton<O: StochasticObjective>(
    objective: &mut O,
    theta: &mut Theta,
    iterations: usize,
    alpha: f64,
    clip: f64,
    diag: &mut FitDiagnostics,
) -> Result<bool> {
    for _ in 0..iterations {
        let (eval, hessian) = objective.derivatives(theta)?;
        let finite = eval.value.is_finite()
            && eval.gradient.iter().all(|g| g.is_finite())
            && hessian.iter().all(|h| h.is_finite());
        if !finite {
            diag.aborted = true;
            return Ok(false);
        }
        let step = newton_ascent_step(&eval.gradient, &hessian, alpha, clip);
        let mut next = theta.clone();
        for (z, s) in next.zeta.iter_mut().zip(&step.step) {
            *z += s;
        }
        if !next.is_finite() {
            diag.aborted = true;
            return Ok(false);
        }
        diag.losses.push(eval.value);
        diag.step_norms.push(step.step.iter().map(|s| s * s).sum::<f64>().sqrt());
        diag.gradient_fallbacks += step.fallback as usize;
        diag.clipped_steps += step.clipped as usize;
        *theta = next;
        diag.trajectory.push(theta.zeta.clone());
    }
    Ok(true)
}

struct PosteriorObjective<'a, R: Rng + ?Sized> {
    posterior: &'a AnalysisResult,
    family: &'a KernelFamily,
    ens: &'a Ensemble,
    basis: &'a CovarianceBasis,
    batch: usize,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> StochasticObjective for PosteriorObjective<'_, R> {
    fn derivatives(&mut self, theta: &Theta) -> Result<(LossEvaluation, DMatrix<f64>)> {
        let grad_batch = mixture_sample(&self.posterior.posterior, self.rng, self.batch);
        let hess_batch = mixture_sample(&self.posterior.posterior, self.rng, self.batch);
        derivatives_with_basis(theta, &grad_batch, &hess_batch, self.family, self.ens, self.basis)
    }
}

/// Runs `cfg.outer` EM iterations starting from `theta0`.
pub fn em_fit<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    family: &KernelFamily,
    theta0: &Theta,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<(Theta, FitDiagnostics)> {
    let mut diag = FitDiagnostics {
        trajectory: vec![theta0.zeta.clone()],
        ..Default::default()
    };
    if cfg.outer == 0 {
        return Ok((theta0.clone(), diag));
    }
    cfg.validate()?;
    let basis = CovarianceBasis::new(ens)?;
    let mut theta = theta0.clone();
    for _ in 0..cfg.outer {
        let kernel = assemble_from_basis(family, &theta, &basis)?;
        let candidate = engmf_analysis(ens, &kernel, obs, y)?;
        let mut objective = PosteriorObjective {
            posterior: &candidate,
            family,
            ens,
            basis: &basis,
            batch: cfg.batch,
            rng: &mut *rng,
        };
        if !subsampled_newton(&mut objective, &mut theta, cfg.inner, cfg.alpha, cfg.clip, &mut diag)? {
            break;
        }
    }
    Ok((theta, diag))
}

#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    pub ensemble: Ensemble,
    pub theta: Theta,
    pub analysis: AnalysisResult,
    pub diagnostics: FitDiagnostics,
}

/// `theta` with the bandwidth reset to the normal-reference value and the
/// auxiliary parameter kept.
pub fn default_theta(family: &KernelFamily, current: &Theta, members: usize, dim: usize) -> Result<Theta> {
    let aux = current.physical(family).aux;
    Theta::from_physical(
        family,
        PhysicalParams {
            beta2: silverman_bandwidth(members, dim),
            aux,
        },
    )
}

/// One adaptive assimilation step on an already-propagated ensemble.
pub fn aengmf_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    family: &KernelFamily,
    theta_prev: &Theta,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<AdaptiveStep> {
    match adaptive_attempt(ens, obs, y, family, theta_prev, cfg, rng) {
        Err(Error::SingularKernel) => {
            let reset = default_theta(family, theta_prev, ens.len(), ens.dim())?;
            let mut step = adaptive_attempt(ens, obs, y, family, &reset, cfg, rng)?;
            step.diagnostics.reset_to_default = true;
            Ok(step)
        }
        other => other,
    }
}

fn adaptive_attempt<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    family: &KernelFamily,
    theta0: &Theta,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<AdaptiveStep> {
    let (theta, diagnostics) = em_fit(ens, obs, y, family, theta0, cfg, rng)?;
    let kernel = assemble_from_basis(family, &theta, &CovarianceBasis::new(ens)?)?;
    let analysis = engmf_analysis(ens, &kernel, obs, y)?;
    let mut ensemble = gmm_resample(&analysis, rng, ens.len())?;
    ensemble.time_index = ens.time_index + 1;
    Ok(AdaptiveStep {
        ensemble,
        theta,
        analysis,
        diagnostics,
    })
}
