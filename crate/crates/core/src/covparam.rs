//! Parameterized kernel covariances `B(theta)` built from the ensemble's
//! empirical covariance: plain bandwidth scaling, shrinkage toward the
//! diagonal, and Gaussian-tapered (localized) covariance.
//!
//! Parameters are optimized in an unconstrained space `zeta`:
//!
//! | physical | map                         |
//! |----------|-----------------------------|
//! | `beta`   | `zeta_beta^2` (so `beta^2 = zeta_beta^4`) |
//! | `gamma`  | `tanh(zeta_gamma)`, clamped to `(1e-6, 1 - 1e-6)` |
//! | `r`      | `zeta_r^2`                  |

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gmm::Ensemble;
use crate::linalg::{cholesky_with_jitter, log_det_from_factor, symmetrize};

pub const GAMMA_MIN: f64 = 1e-6;
pub const GAMMA_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    /// `B = beta^2 P`.
    Bandwidth,
    /// `B = beta^2 [gamma diag(P) + (1 - gamma) P]`.
    Shrinkage,
    /// `B = beta^2 (rho(r) o P)` with Gaussian taper over `distances`.
    Localized { distances: DMatrix<f64> },
}

impl KernelFamily {
    pub fn param_count(&self) -> usize {
        match self {
            KernelFamily::Bandwidth => 1,
            KernelFamily::Shrinkage | KernelFamily::Localized { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Bandwidth => "bandwidth",
            KernelFamily::Shrinkage => "shrinkage",
            KernelFamily::Localized { .. } => "localized",
        }
    }
}

/// Physical kernel parameters. `aux` is `gamma` for shrinkage and the
/// radius `r` for localization; unused for the bandwidth family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub beta2: f64,
    pub aux: Option<f64>,
}

fn clamp_gamma(g: f64) -> f64 {
    g.clamp(GAMMA_MIN, GAMMA_MAX)
}

/// Unconstrained optimizer coordinates. Layout is `[zeta_beta]` or
/// `[zeta_beta, zeta_aux]` depending on the family.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub zeta: Vec<f64>,
}

impl Theta {
    pub fn from_physical(family: &KernelFamily, p: PhysicalParams) -> Result<Self> {
        if !(p.beta2 > 0.0) || !p.beta2.is_finite() {
            return Err(Error::Domain(format!("beta^2 must be positive, got {}", p.beta2)));
        }
        let zb = p.beta2.powf(0.25);
        let zeta = match family {
            KernelFamily::Bandwidth => vec![zb],
            KernelFamily::Shrinkage => {
                let g = p.aux.ok_or_else(|| Error::Domain("shrinkage needs gamma".into()))?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Domain(format!("gamma must lie in (0,1), got {g}")));
                }
                vec![zb, clamp_gamma(g).atanh()]
            }
            KernelFamily::Localized { .. } => {
                let r = p.aux.ok_or_else(|| Error::Domain("localization needs a radius".into()))?;
                if !(r > 0.0) {
                    return Err(Error::Domain(format!("radius must be positive, got {r}")));
                }
                vec![zb, r.sqrt()]
            }
        };
        Ok(Self { zeta })
    }

    pub fn bandwidth(beta2: f64) -> Result<Self> {
        Self::from_physical(&KernelFamily::Bandwidth, PhysicalParams { beta2, aux: None })
    }

    pub fn beta(&self) -> f64 {
        self.zeta[0] * self.zeta[0]
    }

    pub fn beta2(&self) -> f64 {
        self.beta().powi(2)
    }

    pub fn physical(&self, family: &KernelFamily) -> PhysicalParams {
        let aux = match family {
            KernelFamily::Bandwidth => None,
            KernelFamily::Shrinkage => Some(clamp_gamma(self.zeta[1].tanh())),
            KernelFamily::Localized { .. } => Some(self.zeta[1] * self.zeta[1]),
        };
        PhysicalParams {
            beta2: self.beta2(),
            aux,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.zeta.iter().all(|z| z.is_finite())
    }
}

/// Ensemble-derived pieces of `B(theta)` that do not depend on `theta`.
#[derive(Debug, Clone)]
pub struct CovarianceBasis {
    pub empirical: DMatrix<f64>,
    pub members: usize,
}

impl CovarianceBasis {
    pub fn new(ens: &Ensemble) -> Result<Self> {
        Ok(Self {
            empirical: empirical_covariance(ens)?,
            members: ens.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.empirical.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct AssembledKernel {
    pub b: DMatrix<f64>,
    /// Lower Cholesky factor of `b`.
    pub factor: DMatrix<f64>,
    pub log_det: f64,
    /// `dB/dzeta_k`, one symmetric matrix per parameter.
    pub db_dzeta: Vec<DMatrix<f64>>,
}

impl AssembledKernel {
    /// Wraps an externally supplied SPD covariance with no parameter
    /// derivatives.
    pub fn from_covariance(b: DMatrix<f64>) -> Result<Self> {
        let (b, chol) = cholesky_with_jitter(&b).ok_or(Error::SingularKernel)?;
        let factor = chol.l();
        Ok(Self {
            log_det: log_det_from_factor(&factor),
            b,
            factor,
            db_dzeta: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self
            .factor
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("factor has a positive diagonal");
        linv.transpose() * linv
    }
}

/// Unweighted sample covariance `X (I - 11^T/N) X^T / (N - 1)`.
pub fn empirical_covariance(ens: &Ensemble) -> Result<DMatrix<f64>> {
    let count = ens.len();
    if count < 2 {
        return Err(Error::InsufficientEnsemble {
            required: 2,
            actual: count,
        });
    }
    let mean = ens.particles.column_sum() / count as f64;
    let mut centered = ens.particles.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut p = &centered * centered.transpose() / (count as f64 - 1.0);
    symmetrize(&mut p);
    Ok(p)
}

/// Normal-reference bandwidth `(4 / (N (n + 2)))^(2 / (n + 4))`.
pub fn silverman_bandwidth(members: usize, dim: usize) -> f64 {
    let (nn, n) = (members as f64, dim as f64);
    (4.0 / (nn * (n + 2.0))).powf(2.0 / (n + 4.0))
}

/// Rao-Blackwellized Ledoit-Wolf shrinkage weight toward target `t`.
///
/// The result is capped at 1; a sphericity statistic of zero (the scaled
/// covariance is proportional to the identity) hits the cap.
pub fn rblw_shrinkage(p: &DMatrix<f64>, t: &DMatrix<f64>, members: usize) -> Result<f64> {
    let n = p.nrows();
    if members < 3 {
        return Err(Error::InsufficientEnsemble {
            required: 3,
            actual: members,
        });
    }
    if n < 2 {
        return Ok(1.0);
    }
    let eig = SymmetricEigen::new(t.clone());
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Domain("shrinkage target must be SPD".into()));
    }
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let c = &inv_sqrt * p * &inv_sqrt;
    let tr = c.trace();
    let tr2 = (&c * &c).trace();
    let nf = n as f64;
    let u_hat = (nf * tr2 / (tr * tr) - 1.0) / (nf - 1.0);
    let nn = members as f64;
    let first = (nn - 2.0) / (nn * (nn + 2.0));
    if !(u_hat > 0.0) {
        return Ok(1.0);
    }
    let second = ((nf + 1.0) * nn - 2.0) / (nn * (nn + 2.0) * (nf - 1.0) * u_hat);
    Ok((first + second).min(1.0))
}

/// Gaussian taper `exp(-d^2 / (2 r^2))`.
pub fn localization_weights(distances: &DMatrix<f64>, radius: f64) -> Result<DMatrix<f64>> {
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("localization radius must be positive, got {radius}")));
    }
    Ok(distances.map(|d| (-0.5 * d * d / (radius * radius)).exp()))
}

/// Assembles `B(theta)` and its derivatives for the given ensemble.
pub fn assemble_kernel(family: &KernelFamily, theta: &Theta, ens: &Ensemble) -> Result<AssembledKernel> {
    assemble_from_basis(family, theta, &CovarianceBasis::new(ens)?)
}

pub fn assemble_from_basis(
    family: &KernelFamily,
    theta: &Theta,
    basis: &CovarianceBasis,
) -> Result<AssembledKernel> {
    if theta.zeta.len() != family.param_count() {
        return Err(Error::DimensionMismatch {
            expected: family.param_count(),
            actual: theta.zeta.len(),
        });
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("kernel parameters".into()));
    }
    let p = &basis.empirical;
    let n = p.nrows();
    let zb = theta.zeta[0];
    let beta2 = theta.beta2();
    let dbeta2 = 4.0 * zb.powi(3);

    let (unit, mut derivs) = match family {
        KernelFamily::Bandwidth => {
            if basis.members <= n {
                // rank(P) <= N - 1 < n
                return Err(Error::SingularKernel);
            }
            (p.clone(), Vec::new())
        }
        KernelFamily::Shrinkage => {
            let zg = theta.zeta[1];
            let raw = zg.tanh();
            let gamma = clamp_gamma(raw);
            let dgamma = if raw == gamma { 1.0 - raw * raw } else { 0.0 };
            let target = DMatrix::from_diagonal(&p.diagonal());
            let unit = &target * gamma + p * (1.0 - gamma);
            let d_gamma = (&target - p) * (beta2 * dgamma);
            (unit, vec![d_gamma])
        }
        KernelFamily::Localized { distances } => {
            if distances.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: distances.nrows(),
                });
            }
            let zr = theta.zeta[1];
            let r = zr * zr;
            let rho = localization_weights(distances, r)?;
            let tapered = rho.component_mul(p);
            let dr = 2.0 * zr;
            let d_r = DMatrix::from_fn(n, n, |l, q| {
                let d = distances[(l, q)];
                beta2 * d * d / (r * r * r) * tapered[(l, q)] * dr
            });
            (tapered, vec![d_r])
        }
    };
    derivs.insert(0, &unit * dbeta2);
    let mut b = unit * beta2;
    symmetrize(&mut b);
    let (b, chol) = cholesky_with_jitter(&b).ok_or(Error::SingularKernel)?;
    let factor = chol.l();
    Ok(AssembledKernel {
        log_det: log_det_from_factor(&factor),
        b,
        factor,
        db_dzeta: derivs,
    })
}

/// Rayleigh log-prior on `beta` with scale set by the normal-reference
/// bandwidth; shrinkage and radius are flat. Returns the value and its
/// gradient in `zeta` coordinates.
pub fn log_parameter_prior(
    family: &KernelFamily,
    theta: &Theta,
    members: usize,
    dim: usize,
) -> (f64, Vec<f64>) {
    let bg2 = silverman_bandwidth(members, dim);
    let beta = theta.beta();
    let value = 2f64.ln() - bg2.ln() + beta.ln() - beta * beta / bg2;
    let dbeta = 1.0 / beta - 2.0 * beta / bg2;
    let mut grad = vec![0.0; family.param_count()];
    grad[0] = dbeta * 2.0 * theta.zeta[0];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::cyclic_distance_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(n: usize, count: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::from_fn(n, count, |_, _| rng.random_range(-2.0..2.0));
        // correlate neighbours a little
        for j in 0..count {
            for i in 1..n {
                x[(i, j)] += 0.6 * x[(i - 1, j)];
            }
        }
        Ensemble::uniform(x).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn empirical_covariance_examples() {
        let same = Ensemble::uniform(DMatrix::from_element(3, 5, 1.5)).unwrap();
        assert!(empirical_covariance(&same).unwrap().amax() == 0.0);

        let two = Ensemble::uniform(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
        assert!((empirical_covariance(&two).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);

        let one = Ensemble::uniform(DMatrix::zeros(2, 1)).unwrap();
        assert!(matches!(
            empirical_covariance(&one),
            Err(Error::InsufficientEnsemble { .. })
        ));
    }

    #[test]
    fn empirical_covariance_matches_projector_formula() {
        let ens = random_ensemble(4, 9, 5);
        let nn = 9.0;
        let proj = DMatrix::identity(9, 9) - DMatrix::from_element(9, 9, 1.0 / nn);
        let oracle = &ens.particles * proj * ens.particles.transpose() / (nn - 1.0);
        let ours = empirical_covariance(&ens).unwrap();
        assert!((ours - oracle).amax() < 1e-12);
    }

    #[test]
    fn silverman_examples() {
        assert_eq!(silverman_bandwidth(1, 2), 1.0);
        assert!((silverman_bandwidth(100, 3) - 0.251_699_790).abs() < 1e-8);
        assert!((silverman_bandwidth(20, 40) - 0.784_232_033).abs() < 1e-8);
    }

    #[test]
    fn rblw_examples() {
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.3, 1.3]));
        assert_eq!(rblw_shrinkage(&p, &p, 10).unwrap(), 1.0);

        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let t = DMatrix::identity(2, 2);
        let g = rblw_shrinkage(&p, &t, 10).unwrap();
        let expected = 8.0 / 120.0 + 28.0 / (120.0 * 0.36);
        assert!((g - expected).abs() < 1e-12);
        assert!((g - 0.71481).abs() < 1e-5);
    }

    #[test]
    fn localization_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
        let rho = localization_weights(&d, 3.0).unwrap();
        assert_eq!(rho[(0, 0)], 1.0);
        assert!((rho[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
        let wide = localization_weights(&cyclic_distance_matrix(40), 1e9).unwrap();
        assert!(wide.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(localization_weights(&d, 0.0).is_err());
    }

    #[test]
    fn assembly_limits() {
        let ens = random_ensemble(3, 12, 8);
        let p = empirical_covariance(&ens).unwrap();

        let k = assemble_kernel(&KernelFamily::Bandwidth, &Theta::bandwidth(1.0).unwrap(), &ens).unwrap();
        assert!((&k.b - &p).amax() < 1e-14);

        let th = Theta { zeta: vec![0.9, 30.0] };
        let k = assemble_kernel(&KernelFamily::Shrinkage, &th, &ens).unwrap();
        let target = DMatrix::from_diagonal(&p.diagonal()) * th.beta2();
        assert!((&k.b - &target).amax() < 1e-5 * target.amax());

        let loc = KernelFamily::Localized {
            distances: cyclic_distance_matrix(3),
        };
        let th = Theta::from_physical(&loc, PhysicalParams { beta2: 0.4, aux: Some(1e9) }).unwrap();
        let a = assemble_kernel(&loc, &th, &ens).unwrap();
        let b = assemble_kernel(&KernelFamily::Bandwidth, &Theta::bandwidth(0.4).unwrap(), &ens).unwrap();
        assert!((&a.b - &b.b).amax() < 1e-9);
        assert!((&a.factor * a.factor.transpose() - &a.b).amax() < 1e-10 * a.b.amax());
    }

    #[test]
    fn bandwidth_rejects_rank_deficient_ensembles() {
        let ens = random_ensemble(5, 4, 1);
        let err = assemble_kernel(&KernelFamily::Bandwidth, &Theta::bandwidth(0.5).unwrap(), &ens);
        assert!(matches!(err, Err(Error::SingularKernel)));
        // Shrinkage repairs it.
        let th = Theta { zeta: vec![0.8, 0.5] };
        assert!(assemble_kernel(&KernelFamily::Shrinkage, &th, &ens).is_ok());
    }

    fn families(n: usize) -> Vec<KernelFamily> {
        vec![
            KernelFamily::Bandwidth,
            KernelFamily::Shrinkage,
            KernelFamily::Localized {
                distances: cyclic_distance_matrix(n),
            },
        ]
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        for trial in 0..10 {
            let ens = random_ensemble(n, 12, 100 + trial);
            for family in families(n) {
                let zeta: Vec<f64> = (0..family.param_count())
                    .map(|k| if k == 0 { rng.random_range(0.5..1.1) } else { rng.random_range(0.4..2.0) })
                    .collect();
                let theta = Theta { zeta: zeta.clone() };
                let k = assemble_kernel(&family, &theta, &ens).unwrap();
                for p in 0..zeta.len() {
                    let h = 1e-5;
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up.zeta[p] += h;
                    dn.zeta[p] -= h;
                    let fd = (assemble_kernel(&family, &up, &ens).unwrap().b
                        - assemble_kernel(&family, &dn, &ens).unwrap().b)
                        / (2.0 * h);
                    let scale = fd.amax();
                    for (a, b) in k.db_dzeta[p].iter().zip(fd.iter()) {
                        assert!(
                            (a - b).abs() <= 1e-5 * scale,
                            "{} param {p}: {a} vs {b}",
                            family.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn assembled_kernels_are_symmetric_spd() {
        for seed in 0..10 {
            let ens = random_ensemble(6, 4, seed);
            for family in families(6).into_iter().skip(1) {
                let k = assemble_kernel(&family, &Theta { zeta: vec![0.8, 0.7] }, &ens).unwrap();
                assert!((&k.b - k.b.transpose()).amax() <= 1e-12 * k.b.amax());
            }
        }
    }

    #[test]
    fn shrinkage_excess_over_target_is_psd() {
        let ens = random_ensemble(6, 8, 77);
        let th = Theta { zeta: vec![0.9, 0.4] };
        let k = assemble_kernel(&KernelFamily::Shrinkage, &th, &ens).unwrap();
        let phys = th.physical(&KernelFamily::Shrinkage);
        let p = empirical_covariance(&ens).unwrap();
        let rest = &k.b - DMatrix::from_diagonal(&p.diagonal()) * (phys.beta2 * phys.aux.unwrap());
        let eig = SymmetricEigen::new(rest);
        assert!(eig.eigenvalues.iter().all(|l| *l > -1e-10));
    }

    #[test]
    fn prior_examples() {
        let (members, dim) = (50, 3);
        let bg2 = silverman_bandwidth(members, dim);
        let at_mode = Theta::bandwidth(bg2 / 2.0).unwrap();
        let (_, g) = log_parameter_prior(&KernelFamily::Bandwidth, &at_mode, members, dim);
        assert!(g[0].abs() < 1e-12);

        let at_bg = Theta::bandwidth(bg2).unwrap();
        let (v, _) = log_parameter_prior(&KernelFamily::Bandwidth, &at_bg, members, dim);
        assert!((v - (2f64.ln() - bg2.sqrt().ln() - 1.0)).abs() < 1e-12);

        let th = Theta { zeta: vec![0.7, 0.3] };
        let (_, g) = log_parameter_prior(&KernelFamily::Shrinkage, &th, members, dim);
        assert_eq!(g[1], 0.0);
        let loc = KernelFamily::Localized {
            distances: cyclic_distance_matrix(dim),
        };
        let (_, g) = log_parameter_prior(&loc, &th, members, dim);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn prior_gradient_matches_finite_difference() {
        let th = Theta { zeta: vec![0.77] };
        let (_, g) = log_parameter_prior(&KernelFamily::Bandwidth, &th, 40, 3);
        let h = 1e-6;
        let f = |z: f64| log_parameter_prior(&KernelFamily::Bandwidth, &Theta { zeta: vec![z] }, 40, 3).0;
        let fd = (f(0.77 + h) - f(0.77 - h)) / (2.0 * h);
        assert!(rel_close(g[0], fd, 1e-7));
    }

    proptest! {
        #[test]
        fn zeta_round_trip(beta2 in 1e-4f64..10.0, gamma in 0.01f64..0.99, r in 0.1f64..50.0) {
            let cases = [
                (KernelFamily::Bandwidth, None),
                (KernelFamily::Shrinkage, Some(gamma)),
                (KernelFamily::Localized { distances: cyclic_distance_matrix(4) }, Some(r)),
            ];
            for (family, aux) in cases {
                let phys = PhysicalParams { beta2, aux };
                let th = Theta::from_physical(&family, phys).unwrap();
                let back = th.physical(&family);
                prop_assert!(rel_close(back.beta2, beta2, 1e-12));
                if let (Some(a), Some(b)) = (aux, back.aux) {
                    prop_assert!(rel_close(a, b, 1e-12));
                }
                let again = Theta::from_physical(&family, back).unwrap();
                for (a, b) in th.zeta.iter().zip(&again.zeta) {
                    prop_assert!(rel_close(*a, *b, 1e-12));
                }
            }
        }

        #[test]
        fn rblw_is_a_valid_weight(seed in 0u64..200, n in 2usize..8, count in 3usize..30) {
            let ens = random_ensemble(n, count, seed);
            let p = empirical_covariance(&ens).unwrap();
            let t = DMatrix::from_diagonal(&p.diagonal());
            let g = rblw_shrinkage(&p, &t, count).unwrap();
            prop_assert!(g > 0.0 && g <= 1.0);
        }
    }
}
