//! The ensemble Gaussian mixture filter analysis: every prior kernel
//! `N(x_j, B)` is paired with every observation-error component and
//! updated by a Kalman-type step, then the mixture is resampled.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::covparam::AssembledKernel;
use crate::dynamics::ObservationModel;
use crate::error::{Error, Result};
use crate::gmm::{mixture_sample, normalize_log_weights, Ensemble, GaussianMixture};
use crate::linalg::{cholesky_with_jitter, symmetrize, LN_2PI};

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    /// `J * M` components in `(particle, obs component)` lexicographic order.
    pub posterior: GaussianMixture,
    /// Gain `G_{j,k}` per component, `n x m`.
    pub gains: Vec<DMatrix<f64>>,
    /// `H(x_j) - ybar_k` per component.
    pub innovations: Vec<DVector<f64>>,
    /// `log N(ybar_k; H(x_j), S_{j,k})` per component.
    pub log_normalizers: Vec<f64>,
}

impl AnalysisResult {
    pub fn len(&self) -> usize {
        self.posterior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posterior.is_empty()
    }
}

pub fn engmf_analysis(
    ens: &Ensemble,
    kernel: &AssembledKernel,
    obs: &ObservationModel,
    y: &DVector<f64>,
) -> Result<AnalysisResult> {
    let n = ens.dim();
    if kernel.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: kernel.dim(),
        });
    }
    if y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.obs_dim(),
            actual: y.len(),
        });
    }
    let b = &kernel.b;
    let m = y.len();
    let count = ens.len() * obs.noise.len();

    let mut log_weights = Vec::with_capacity(count);
    let mut means = DMatrix::zeros(n, count);
    let mut factors = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    let mut gains = Vec::with_capacity(count);
    let mut innovations = Vec::with_capacity(count);
    let mut log_normalizers = Vec::with_capacity(count);

    for j in 0..ens.len() {
        let x = ens.particle(j);
        let hx = obs.apply(&x);
        let h = obs.jacobian(&x)?;
        let hb = &h * b;
        for (k, noise) in obs.noise.iter().enumerate() {
            let ybar = y + &noise.offset;
            let mut s = &hb * h.transpose() + &noise.covariance;
            symmetrize(&mut s);
            let chol = Cholesky::new(s).ok_or(Error::ObservationDegeneracy)?;
            // G^T = S^{-1} H B
            let gain = chol.solve(&hb).transpose();
            let innovation = &hx - &ybar;
            let mean = &x - &gain * &innovation;

            let mut post = b - &gain * &hb;
            symmetrize(&mut post);
            let (_, post_chol) = cholesky_with_jitter(&post).ok_or(Error::PosteriorFactorization)?;

            let z = chol
                .l()
                .solve_lower_triangular(&innovation)
                .expect("innovation factor has a positive diagonal");
            let half_log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
            let log_norm = -0.5 * z.norm_squared() - half_log_det - 0.5 * m as f64 * LN_2PI;

            log_weights.push(ens.log_weights[j] + noise.weight.ln() + log_norm);
            means.set_column(j * obs.noise.len() + k, &mean);
            factors.push(post_chol.l());
            provenance.push((j, k));
            gains.push(gain);
            innovations.push(innovation);
            log_normalizers.push(log_norm);
        }
    }

    normalize_log_weights(&mut log_weights)?;
    let posterior = GaussianMixture::new(log_weights, means, factors)?.with_provenance(provenance);
    Ok(AnalysisResult {
        posterior,
        gains,
        innovations,
        log_normalizers,
    })
}

/// Draws a fresh, uniformly weighted ensemble from the analysis mixture.
pub fn gmm_resample<R: Rng + ?Sized>(result: &AnalysisResult, rng: &mut R, count: usize) -> Result<Ensemble> {
    if count == 0 {
        return Err(Error::Contract("resample count must be positive".into()));
    }
    Ensemble::uniform(mixture_sample(&result.posterior, rng, count))
}

/// Weighted mean of the posterior component means.
pub fn posterior_mean(result: &AnalysisResult) -> DVector<f64> {
    result.posterior.mean()
}

/// One non-adaptive EnGMF step with a fixed kernel: analysis, then
/// resampling back to the input ensemble size.
pub fn engmf_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    kernel: &AssembledKernel,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<(Ensemble, AnalysisResult)> {
    let analysis = engmf_analysis(ens, kernel, obs, y)?;
    let mut next = gmm_resample(&analysis, rng, ens.len())?;
    next.time_index = ens.time_index + 1;
    Ok((next, analysis))
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;
    use super::*;
    use crate::dynamics::ObservationOperator;
    use crate::gmm::log_sum_exp;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_obs(n: usize, r: f64) -> ObservationModel {
        ObservationModel::gaussian(
            ObservationOperator::Linear(DMatrix::identity(n, n)),
            DMatrix::identity(n, n) * r,
        )
        .unwrap()
    }

    fn scalar_kernel(b: f64) -> AssembledKernel {
        AssembledKernel::from_covariance(DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn covariance(result: &AnalysisResult, c: usize) -> DMatrix<f64> {
        let l = &result.posterior.factors[c];
        l * l.transpose()
    }

    #[test]
    fn scalar_kalman_example() {
        let ens = Ensemble::uniform(DMatrix::zeros(1, 1)).unwrap();
        let y = DVector::from_element(1, 1.0);
        let r = engmf_analysis(&ens, &scalar_kernel(1.0), &identity_obs(1, 1.0), &y).unwrap();
        assert!((r.posterior.means[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((covariance(&r, 0)[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(r.posterior.log_weights[0].abs() < 1e-15);
    }

    #[test]
    fn two_particle_weights() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap();
        let y = DVector::from_element(1, 0.0);
        let r = engmf_analysis(&ens, &scalar_kernel(1.0), &identity_obs(1, 1.0), &y).unwrap();
        let w: Vec<f64> = r.posterior.log_weights.iter().map(|l| l.exp()).collect();
        assert!((w[0] - 0.56217).abs() < 1e-5, "{w:?}");
        assert!((w[1] - 0.43783).abs() < 1e-5);
        let expected = 1.0 / (1.0 + (-0.25f64).exp());
        assert!((w[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn symmetric_prior_gives_equal_weights() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 2, &[-1.7, 1.7])).unwrap();
        let obs = ObservationModel::gaussian(
            ObservationOperator::Pointwise { omega: 5 },
            DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let y = DVector::from_element(1, 0.0);
        let r = engmf_analysis(&ens, &scalar_kernel(0.4), &obs, &y).unwrap();
        assert!((r.posterior.log_weights[0] - r.posterior.log_weights[1]).abs() < 1e-14);
        assert!((log_sum_exp(&r.posterior.log_weights).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn matrix_kalman_exactness() {
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, -0.3, 0.1, -0.3, 1.0]);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.5]);
        let r = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.4]);
        let x0 = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let y = DVector::from_vec(vec![1.1, 0.4]);
        let obs = ObservationModel::gaussian(ObservationOperator::Linear(h.clone()), r.clone()).unwrap();
        let ens = Ensemble::uniform(DMatrix::from_column_slice(3, 1, x0.as_slice())).unwrap();
        let kernel = AssembledKernel::from_covariance(b.clone()).unwrap();
        let res = engmf_analysis(&ens, &kernel, &obs, &y).unwrap();

        let s = &h * &b * h.transpose() + &r;
        let k = &b * h.transpose() * s.clone().try_inverse().unwrap();
        let mean = &x0 + &k * (&y - &h * &x0);
        let cov = (DMatrix::identity(3, 3) - &k * &h) * &b;
        assert!((res.posterior.component_mean(0) - mean).amax() < 1e-10);
        assert!((covariance(&res, 0) - cov).amax() < 1e-10);
    }

    #[test]
    fn linear_updates_contract_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let particles = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-3.0..3.0));
        let ens = Ensemble::uniform(particles).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
        let kernel = AssembledKernel::from_covariance(b.clone()).unwrap();
        let res = engmf_analysis(&ens, &kernel, &identity_obs(2, 0.5), &DVector::zeros(2)).unwrap();
        for c in 0..res.len() {
            let eig = SymmetricEigen::new(&b - covariance(&res, c));
            assert!(eig.eigenvalues.iter().all(|l| *l > -1e-12));
        }
    }

    #[test]
    fn huge_observation_error_is_uninformative() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 3, &[-1.0, 0.5, 2.0])).unwrap();
        let kernel = scalar_kernel(0.3);
        let res = engmf_analysis(&ens, &kernel, &identity_obs(1, 1e12), &DVector::from_element(1, 4.0)).unwrap();
        for j in 0..3 {
            assert!((res.posterior.means[(0, j)] - ens.particles[(0, j)]).abs() < 1e-5);
            assert!((res.posterior.log_weights[j].exp() - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn observation_mixture_layout() {
        let obs = ObservationModel::mixture(
            ObservationOperator::Linear(DMatrix::identity(1, 1)),
            vec![
                (0.25, DVector::from_element(1, -1.0), DMatrix::from_element(1, 1, 0.5)),
                (0.75, DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 2.0)),
            ],
        )
        .unwrap();
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0])).unwrap();
        let res = engmf_analysis(&ens, &scalar_kernel(1.0), &obs, &DVector::from_element(1, 0.5)).unwrap();
        assert_eq!(res.len(), 6);
        let prov = res.posterior.provenance.as_ref().unwrap();
        assert_eq!(prov[3], (1, 1));
        // component (0, 1): ybar = 1.5, S = 3
        let lw0 = res.log_normalizers[1];
        let expected = -0.5 * 1.5f64.powi(2) / 3.0 - 0.5 * (2.0 * std::f64::consts::PI * 3.0).ln();
        assert!((lw0 - expected).abs() < 1e-14);
    }

    #[test]
    fn resample_examples() {
        let ens = Ensemble::uniform(DMatrix::zeros(1, 1)).unwrap();
        let res = engmf_analysis(&ens, &scalar_kernel(1.0), &identity_obs(1, 1.0), &DVector::from_element(1, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let big = gmm_resample(&res, &mut rng, 100_000).unwrap();
        let mean = big.particles.mean();
        let var = big.particles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99_999.0;
        assert!((mean - 0.5).abs() < 4.0 * (0.5f64 / 1e5).sqrt());
        assert!((var - 0.5).abs() < 0.02);

        let one = gmm_resample(&res, &mut rng, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.log_weights[0], 0.0);
        assert!(gmm_resample(&res, &mut rng, 0).is_err());
    }

    #[test]
    fn degenerate_posterior_resamples_to_component_means() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let res = engmf_analysis(&ens, &scalar_kernel(1e-28), &identity_obs(1, 1.0), &DVector::from_element(1, 0.3)).unwrap();
        let samples = gmm_resample(&res, &mut ChaCha8Rng::seed_from_u64(1), 200).unwrap();
        for v in samples.particles.iter() {
            assert!((v.abs() - 1.0).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 2, &[-2.5, 2.5])).unwrap();
        let res = engmf_analysis(&ens, &scalar_kernel(0.5), &identity_obs(1, 1.0), &DVector::zeros(1)).unwrap();
        assert!(posterior_mean(&res)[0].abs() < 1e-14);

        let single = Ensemble::uniform(DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        let res = engmf_analysis(&single, &scalar_kernel(1.0), &identity_obs(1, 1.0), &DVector::from_element(1, 1.0)).unwrap();
        assert!((posterior_mean(&res)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_matches_resampled_mean() {
        let ens = Ensemble::uniform(DMatrix::from_row_slice(1, 4, &[-2.0, -0.5, 1.0, 3.0])).unwrap();
        let res = engmf_analysis(&ens, &scalar_kernel(0.6), &identity_obs(1, 0.8), &DVector::from_element(1, 0.7)).unwrap();
        let draws = gmm_resample(&res, &mut ChaCha8Rng::seed_from_u64(17), 1_000_000).unwrap();
        let mc = draws.particles.mean();
        let var = draws.particles.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / 1e6;
        let se = (var / 1e6).sqrt();
        assert!((mc - posterior_mean(&res)[0]).abs() < 4.0 * se);
    }

}
