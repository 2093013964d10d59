//! Chaotic test models, a fixed-step RK4 integrator and the nonlinear
//! observation operators used by the twin experiments.
//!
//! Model error is identically zero: propagation is deterministic, and the
//! `process_noise` slot on [`ModelSpec`] exists only so twin-data generation
//! states it explicitly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Canonical Lorenz '63 parameters.
pub const L63_SIGMA: f64 = 10.0;
pub const L63_RHO: f64 = 28.0;
pub const L63_BETA: f64 = 8.0 / 3.0;

/// Default internal integration step for both models.
pub const DEFAULT_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { dimension: usize, forcing: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Internal RK4 step `h`.
    pub step: f64,
    /// Time between assimilations.
    pub interval: f64,
    /// Standard deviation of additive model error; always zero here.
    pub process_noise: f64,
}

impl ModelSpec {
    pub fn lorenz63(interval: f64) -> Self {
        Self {
            kind: ModelKind::Lorenz63 {
                sigma: L63_SIGMA,
                rho: L63_RHO,
                beta: L63_BETA,
            },
            step: DEFAULT_STEP,
            interval,
            process_noise: 0.0,
        }
    }

    pub fn lorenz96(dimension: usize, forcing: f64, interval: f64) -> Result<Self> {
        if dimension < 4 {
            return Err(Error::InvalidModel(format!(
                "Lorenz '96 needs at least 4 variables, got {dimension}"
            )));
        }
        Ok(Self {
            kind: ModelKind::Lorenz96 { dimension, forcing },
            step: DEFAULT_STEP,
            interval,
            process_noise: 0.0,
        })
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn dimension(&self) -> usize {
        match self.kind {
            ModelKind::Lorenz63 { .. } => 3,
            ModelKind::Lorenz96 { dimension, .. } => dimension,
        }
    }

    /// Number of internal steps per assimilation interval.
    pub fn substeps(&self) -> usize {
        step_count(self.interval, self.step)
    }

    pub fn tendency_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::Lorenz63 { sigma, rho, beta } => l63_into(x, out, sigma, rho, beta),
            ModelKind::Lorenz96 { forcing, .. } => l96_into(x, out, forcing),
        }
    }

    pub fn tendency(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.tendency_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Integrates `state` in place over `duration`.
    pub fn integrate_in_place(&self, state: &mut [f64], duration: f64) -> Result<()> {
        let mut ws = Rk4Workspace::new(state.len());
        ws.integrate(|x, dx| self.tendency_into(x, dx), self.step, state, duration)
    }

    pub fn integrate(&self, state: &DVector<f64>, duration: f64) -> Result<DVector<f64>> {
        let mut out = state.clone();
        self.integrate_in_place(out.as_mut_slice(), duration)?;
        Ok(out)
    }

    /// Propagates every column of `particles` over one assimilation interval.
    pub fn propagate_ensemble(&self, particles: &mut DMatrix<f64>) -> Result<()> {
        let n = particles.nrows();
        let mut ws = Rk4Workspace::new(n);
        for column in particles.as_mut_slice().chunks_mut(n) {
            ws.integrate(|x, dx| self.tendency_into(x, dx), self.step, column, self.interval)?;
        }
        Ok(())
    }

    /// Cyclic grid distance `min(|l-q|, n-|l-q|)` between state indices.
    pub fn cyclic_distances(&self) -> DMatrix<f64> {
        cyclic_distance_matrix(self.dimension())
    }
}

pub fn cyclic_distance_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |l, q| {
        let d = l.abs_diff(q);
        d.min(n - d) as f64
    })
}

fn l63_into(x: &[f64], out: &mut [f64], sigma: f64, rho: f64, beta: f64) {
    out[0] = sigma * (x[1] - x[0]);
    out[1] = x[0] * (rho - x[2]) - x[1];
    out[2] = x[0] * x[1] - beta * x[2];
}

fn l96_into(x: &[f64], out: &mut [f64], forcing: f64) {
    let n = x.len();
    for k in 0..n {
        let km1 = x[(k + n - 1) % n];
        let km2 = x[(k + n - 2) % n];
        let kp1 = x[(k + 1) % n];
        out[k] = -km1 * (km2 - kp1) - x[k] + forcing;
    }
}

/// Lorenz '63 tendency with canonical parameters.
pub fn lorenz63_tendency(state: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    l63_into(state, &mut out, L63_SIGMA, L63_RHO, L63_BETA);
    out
}

/// Lorenz '96 tendency with cyclic indexing.
pub fn lorenz96_tendency(state: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if state.len() < 4 {
        return Err(Error::InvalidModel(format!(
            "Lorenz '96 needs at least 4 variables, got {}",
            state.len()
        )));
    }
    let mut out = vec![0.0; state.len()];
    l96_into(state, &mut out, forcing);
    Ok(out)
}

/// The wing-center critical point `(sqrt(b(r-1)), sqrt(b(r-1)), r-1)`.
pub fn l63_critical_point() -> [f64; 3] {
    let c = (L63_BETA * (L63_RHO - 1.0)).sqrt();
    [c, c, L63_RHO - 1.0]
}

fn step_count(duration: f64, step: f64) -> usize {
    if duration <= 0.0 {
        return 0;
    }
    ((duration / step).round() as usize).max(1)
}

/// Scratch buffers for classical fourth-order Runge-Kutta.
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Takes `round(duration / step)` equal steps, so the total integrated
    /// time is exactly `duration`.
    pub fn integrate<F>(&mut self, mut f: F, step: f64, state: &mut [f64], duration: f64) -> Result<()>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        if duration < 0.0 {
            return Err(Error::Contract("negative integration duration".into()));
        }
        let steps = step_count(duration, step);
        if steps == 0 {
            return Ok(());
        }
        let h = duration / steps as f64;
        let n = state.len();
        for s in 0..steps {
            f(state, &mut self.k1);
            for i in 0..n {
                self.tmp[i] = state[i] + 0.5 * h * self.k1[i];
            }
            f(&self.tmp, &mut self.k2);
            for i in 0..n {
                self.tmp[i] = state[i] + 0.5 * h * self.k2[i];
            }
            f(&self.tmp, &mut self.k3);
            for i in 0..n {
                self.tmp[i] = state[i] + h * self.k3[i];
            }
            f(&self.tmp, &mut self.k4);
            let mut finite = true;
            for i in 0..n {
                state[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                finite &= state[i].is_finite();
            }
            if !finite {
                return Err(Error::Divergence { step: s });
            }
        }
        Ok(())
    }
}

/// Fixed-step RK4 on an arbitrary autonomous system.
pub fn rk4_integrate<F>(f: F, step: f64, state: &[f64], duration: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut out = state.to_vec();
    Rk4Workspace::new(state.len()).integrate(f, step, &mut out, duration)?;
    Ok(out)
}

/// Euclidean distance to the Lorenz '63 wing center.
pub fn l63_distance(state: &[f64]) -> f64 {
    let c = l63_critical_point();
    ((state[0] - c[0]).powi(2) + (state[1] - c[1]).powi(2) + (state[2] - c[2]).powi(2)).sqrt()
}

/// Distance observation and its gradient row.
pub fn observe_l63_distance(state: &[f64]) -> Result<(f64, [f64; 3])> {
    let c = l63_critical_point();
    let d = l63_distance(state);
    if d == 0.0 {
        return Err(Error::NonDifferentiable(
            "distance observation at the critical point".into(),
        ));
    }
    Ok((
        d,
        [(state[0] - c[0]) / d, (state[1] - c[1]) / d, (state[2] - c[2]) / d],
    ))
}

/// `(x/2) [1 + (|x|/10)^(omega-1)]` and its derivative.
pub fn pointwise_value(x: f64, omega: u32) -> f64 {
    0.5 * x * (1.0 + (x.abs() / 10.0).powi(omega as i32 - 1))
}

pub fn pointwise_derivative(x: f64, omega: u32) -> f64 {
    let k = omega as i32 - 1;
    0.5 + omega as f64 * x.abs().powi(k) / (2.0 * 10f64.powi(k))
}

/// Component-wise nonlinear observation; returns values and the Jacobian diagonal.
pub fn observe_l96_pointwise(state: &[f64], omega: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    if omega < 1 {
        return Err(Error::Domain("omega must be at least 1".into()));
    }
    Ok((
        state.iter().map(|&x| pointwise_value(x, omega)).collect(),
        state.iter().map(|&x| pointwise_derivative(x, omega)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    /// Scalar distance to the Lorenz '63 wing center.
    L63Distance,
    /// Component-wise polynomial nonlinearity of odd degree `omega`.
    Pointwise { omega: u32 },
    /// `y = H x`.
    Linear(DMatrix<f64>),
}

impl ObservationOperator {
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            ObservationOperator::L63Distance => 1,
            ObservationOperator::Pointwise { .. } => state_dim,
            ObservationOperator::Linear(h) => h.nrows(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ObservationOperator::L63Distance => DVector::from_element(1, l63_distance(x.as_slice())),
            ObservationOperator::Pointwise { omega } => x.map(|v| pointwise_value(v, *omega)),
            ObservationOperator::Linear(h) => h * x,
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            ObservationOperator::L63Distance => {
                let (_, row) = observe_l63_distance(x.as_slice())?;
                Ok(DMatrix::from_row_slice(1, 3, &row))
            }
            ObservationOperator::Pointwise { omega } => Ok(DMatrix::from_diagonal(
                &x.map(|v| pointwise_derivative(v, *omega)),
            )),
            ObservationOperator::Linear(h) => Ok(h.clone()),
        }
    }
}

/// One Gaussian component of the observation-error mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseComponent {
    pub weight: f64,
    pub offset: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance`.
    pub factor: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub operator: ObservationOperator,
    pub noise: Vec<NoiseComponent>,
}

impl ObservationModel {
    /// Single zero-mean Gaussian error with covariance `r`.
    pub fn gaussian(operator: ObservationOperator, r: DMatrix<f64>) -> Result<Self> {
        let m = r.nrows();
        Self::mixture(operator, vec![(1.0, DVector::zeros(m), r)])
    }

    pub fn mixture(
        operator: ObservationOperator,
        components: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Contract("observation mixture needs a component".into()));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| c.0 <= 0.0) {
            return Err(Error::Contract("observation mixture weights must be positive and sum to 1".into()));
        }
        let noise = components
            .into_iter()
            .map(|(weight, offset, covariance)| {
                if covariance.nrows() != offset.len() || !covariance.is_square() {
                    return Err(Error::DimensionMismatch {
                        expected: offset.len(),
                        actual: covariance.nrows(),
                    });
                }
                let factor = nalgebra::Cholesky::new(covariance.clone())
                    .ok_or_else(|| Error::Contract("observation covariance is not SPD".into()))?
                    .l();
                Ok(NoiseComponent {
                    weight,
                    offset,
                    covariance,
                    factor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { operator, noise })
    }

    pub fn obs_dim(&self) -> usize {
        self.noise[0].offset.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.operator.apply(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.operator.jacobian(x)
    }

    /// The single-Gaussian error component; baselines require exactly one.
    pub fn single_component(&self) -> Result<&NoiseComponent> {
        match self.noise.as_slice() {
            [c] => Ok(c),
            _ => Err(Error::Contract(
                "this filter needs a single observation-error component".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn l63_fixed_points() {
        let c = l63_critical_point();
        let t = lorenz63_tendency(&c);
        assert!(t.iter().all(|v| v.abs() < 1e-12), "{t:?}");
        assert_eq!(lorenz63_tendency(&[0.0; 3]), [0.0; 3]);
        let t = lorenz63_tendency(&[1.0, 1.0, 1.0]);
        assert!(close(t[0], 0.0, 1e-15));
        assert!(close(t[1], 26.0, 1e-15));
        assert!(close(t[2], -5.0 / 3.0, 1e-15));
    }

    #[test]
    fn l96_examples() {
        assert!(lorenz96_tendency(&[8.0; 40], 8.0).unwrap().iter().all(|v| *v == 0.0));
        assert!(lorenz96_tendency(&[0.0; 40], 8.0).unwrap().iter().all(|v| *v == 8.0));
        let t = lorenz96_tendency(&[1.0, 2.0, 3.0, 4.0], 8.0).unwrap();
        assert!(close(t[0], 3.0, 1e-15));
        assert!(matches!(lorenz96_tendency(&[1.0; 3], 8.0), Err(Error::InvalidModel(_))));
        assert!(ModelSpec::lorenz96(3, 8.0, 0.2).is_err());
    }

    #[test]
    fn l96_energy_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..40).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t = lorenz96_tendency(&x, 8.0).unwrap();
            let lhs: f64 = x.iter().zip(&t).map(|(a, b)| a * b).sum();
            let rhs: f64 = -x.iter().map(|a| a * a).sum::<f64>() + 8.0 * x.iter().sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rk4_examples() {
        let out = rk4_integrate(|x, dx| dx[0] = -x[0], 0.1, &[1.0], 0.1).unwrap();
        assert!(close(out[0], 0.904_837_5, 1e-7), "{}", out[0]);
        assert!(close(out[0], (-0.1f64).exp(), 1e-7));

        let model = ModelSpec::lorenz63(0.5);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(model.integrate(&x, 0.0).unwrap(), x);

        let c = DVector::from_row_slice(&l63_critical_point());
        let moved = model.integrate(&c, 3.7).unwrap();
        assert!((moved - &c).amax() < 1e-12);
    }

    #[test]
    fn rk4_divergence_reports_step() {
        let err = rk4_integrate(|x, dx| dx[0] = x[0] * x[0], 0.1, &[1.0], 5.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    fn convergence_ratio(model: &ModelSpec, x0: &DVector<f64>) -> f64 {
        let reference = model.clone().with_step(1e-4).integrate(x0, model.interval).unwrap();
        let coarse = model.clone().with_step(0.02).integrate(x0, model.interval).unwrap();
        let fine = model.clone().with_step(0.01).integrate(x0, model.interval).unwrap();
        (coarse - &reference).norm() / (fine - &reference).norm()
    }

    #[test]
    fn rk4_is_fourth_order() {
        let l63 = ModelSpec::lorenz63(0.5);
        let ratio = convergence_ratio(&l63, &DVector::from_vec(vec![1.0, 3.0, 20.0]));
        assert!((12.0..20.0).contains(&ratio), "L63 ratio {ratio}");

        let l96 = ModelSpec::lorenz96(40, 8.0, 0.2).unwrap();
        let x0 = DVector::from_fn(40, |i, _| 8.0 + (i as f64 * 0.7).sin());
        let ratio = convergence_ratio(&l96, &x0);
        assert!((12.0..20.0).contains(&ratio), "L96 ratio {ratio}");
    }

    #[test]
    fn l63_distance_examples() {
        let c = l63_critical_point();
        assert_eq!(l63_distance(&c), 0.0);
        assert!(matches!(observe_l63_distance(&c), Err(Error::NonDifferentiable(_))));
        let (d, _) = observe_l63_distance(&[0.0, 0.0, 0.0]).unwrap();
        assert!(close(d, 873f64.sqrt(), 1e-12));
        assert!(close(d, 29.5466, 1e-4));
        let (_, row) = observe_l63_distance(&[0.3, -4.0, 11.0]).unwrap();
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(close(norm, 1.0, 1e-14));
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(pointwise_value(0.0, 5), 0.0);
        assert_eq!(pointwise_derivative(0.0, 5), 0.5);
        assert!(close(pointwise_value(10.0, 5), 10.0, 1e-12));
        assert!(close(pointwise_derivative(10.0, 5), 3.0, 1e-12));
        assert!(close(pointwise_value(-10.0, 5), -10.0, 1e-12));
        assert!(observe_l96_pointwise(&[1.0], 0).is_err());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let ops = [
            (ObservationOperator::L63Distance, 3),
            (ObservationOperator::Pointwise { omega: 5 }, 6),
        ];
        for (op, n) in ops {
            for _ in 0..100 {
                let x = DVector::from_fn(n, |_, _| rng.random_range(-15.0..15.0));
                let jac = op.jacobian(&x).unwrap();
                let h = 1e-4;
                for c in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (op.apply(&xp) - op.apply(&xm)) / (2.0 * h);
                    for r in 0..fd.len() {
                        let a = jac[(r, c)];
                        let err = (a - fd[r]).abs() / a.abs().max(fd[r].abs()).max(1e-3);
                        assert!(err < 1e-6, "{op:?} ({r},{c}): {a} vs {}", fd[r]);
                    }
                }
            }
        }
    }

    #[test]
    fn observation_mixture_validation() {
        let op = ObservationOperator::Pointwise { omega: 5 };
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ObservationModel::gaussian(op.clone(), bad).is_err());
        let r = DMatrix::identity(2, 2);
        assert!(ObservationModel::mixture(
            op.clone(),
            vec![(0.5, DVector::zeros(2), r.clone()), (0.4, DVector::zeros(2), r.clone())]
        )
        .is_err());
        let ok = ObservationModel::gaussian(op, r).unwrap();
        assert_eq!(ok.obs_dim(), 2);
    }

    #[test]
    fn cyclic_distance_wraps() {
        let d = cyclic_distance_matrix(40);
        assert_eq!(d[(0, 39)], 1.0);
        assert_eq!(d[(0, 20)], 20.0);
        assert_eq!(d[(5, 5)], 0.0);
        assert_eq!(d, d.transpose());
    }
}
