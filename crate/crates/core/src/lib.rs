//! Ensemble Gaussian mixture filtering with adaptive kernel covariances,
//! reference filters, and a twin-experiment harness for chaotic models.

pub mod adapt;
pub mod baselines;
pub mod covparam;
pub mod dynamics;
pub mod engmf;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod linalg;

pub use adapt::{aengmf_step, em_fit, AdaptiveStep, EmConfig, FitDiagnostics};
pub use baselines::{enkf_step, sir_step, BaselineConfig};
pub use covparam::{assemble_kernel, AssembledKernel, KernelFamily, PhysicalParams, Theta};
pub use dynamics::{ModelKind, ModelSpec, ObservationModel, ObservationOperator};
pub use engmf::{engmf_analysis, engmf_step, gmm_resample, posterior_mean, AnalysisResult};
pub use error::{Error, Result};
pub use gmm::{Ensemble, GaussianMixture};
