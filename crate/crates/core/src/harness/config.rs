//! Experiment configuration files.
//!
//! A config is TOML with four fixed tables and one table per filter:
//!
//! ```toml
//! [experiment]
//! steps = 2000          # assimilation cycles T
//! spinup = 500          # leading cycles excluded from the RMSE
//! interval = 0.5        # model time between observations
//! particles = [25, 50]  # ensemble sizes N
//! seeds = [1, 2]
//! # step = 0.01         # RK4 step (optional)
//! # output = "out/l63"  # sweep directory (optional)
//!
//! [model]
//! kind = "lorenz63"     # or "lorenz96", with `dimension` and `forcing`
//!
//! [observation]
//! operator = "distance" # "distance" | "pointwise" (with `omega`) | "identity"
//! variance = 1.0        # R = variance * I
//!
//! [em]
//! outer = 5
//! inner = 1
//! batch = 0             # 0 means S = N
//! alpha = 1.0
//! clip = 1.0
//!
//! [filter.EnGMFEM]
//! method = "aengmf"     # aengmf | engmf | enkf | lenkf | sir
//! family = "bandwidth"  # bandwidth | shrinkage | localized
//! ```
//!
//! Filter keys: `scale` multiplies the normal-reference bandwidth (default 1);
//! `gamma` fixes the shrinkage weight (absent: RBLW estimate each cycle);
//! `radius` is the localization radius (start value for adaptive runs);
//! `rejuvenation` is the SIR post-resampling jitter. Filters keep their file
//! order, which is also the column order of the aggregate CSV. Unknown keys
//! are rejected.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::adapt::EmConfig;
use crate::covparam::KernelFamily;
use crate::dynamics::{ModelSpec, ObservationModel, ObservationOperator, DEFAULT_STEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub observation: ObservationSection,
    #[serde(default)]
    pub em: EmSection,
    pub filter: IndexMap<String, FilterSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub steps: usize,
    pub spinup: usize,
    pub interval: f64,
    pub particles: Vec<usize>,
    pub seeds: Vec<u64>,
    pub step: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Lorenz63,
    Lorenz96,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelName,
    pub dimension: Option<usize>,
    pub forcing: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorName {
    Distance,
    Pointwise,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub operator: OperatorName,
    pub omega: Option<u32>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSection {
    #[serde(default = "defaults::outer")]
    pub outer: usize,
    #[serde(default = "defaults::inner")]
    pub inner: usize,
    #[serde(default)]
    pub batch: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::clip")]
    pub clip: f64,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmConfig::default();
        Self {
            outer: d.outer,
            inner: d.inner,
            batch: 0,
            alpha: d.alpha,
            clip: d.clip,
        }
    }
}

mod defaults {
    use crate::adapt::EmConfig;

    pub fn outer() -> usize {
        EmConfig::default().outer
    }
    pub fn inner() -> usize {
        EmConfig::default().inner
    }
    pub fn alpha() -> f64 {
        EmConfig::default().alpha
    }
    pub fn clip() -> f64 {
        EmConfig::default().clip
    }
    pub fn scale() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Aengmf,
    Engmf,
    Enkf,
    Lenkf,
    Sir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    #[default]
    Bandwidth,
    Shrinkage,
    Localized,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub method: Method,
    #[serde(default)]
    pub family: FamilyName,
    #[serde(default = "defaults::scale")]
    pub scale: f64,
    pub gamma: Option<f64>,
    pub radius: Option<f64>,
    #[serde(default)]
    pub rejuvenation: f64,
}

impl FilterSpec {
    pub fn is_gaussian_mixture(&self) -> bool {
        matches!(self.method, Method::Aengmf | Method::Engmf)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let ex = &self.experiment;
        if ex.spinup + 1 >= ex.steps {
            return bad(format!(
                "need at least two scored cycles: steps = {}, spinup = {}",
                ex.steps, ex.spinup
            ));
        }
        if !(ex.interval > 0.0) {
            return bad(format!("interval must be positive, got {}", ex.interval));
        }
        if let Some(h) = ex.step {
            if !(h > 0.0) {
                return bad(format!("step must be positive, got {h}"));
            }
        }
        if ex.particles.is_empty() || ex.seeds.is_empty() {
            return bad("particles and seeds must be non-empty".into());
        }
        if let Some(&n) = ex.particles.iter().find(|&&n| n < 2) {
            return bad(format!("ensemble size {n} is below 2"));
        }
        let distinct: HashSet<_> = ex.seeds.iter().collect();
        if distinct.len() != ex.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(self.observation.variance > 0.0) {
            return bad("observation variance must be positive".into());
        }
        if self.filter.is_empty() {
            return bad("at least one [filter.NAME] table is required".into());
        }
        self.model_spec()?;
        self.observation_model()?;
        self.em_config(2)?.validate()?;
        for (name, f) in &self.filter {
            let ctx = |msg: &str| Error::Config(format!("filter {name}: {msg}"));
            if f.name_clash(name) {
                return Err(ctx("names may not contain commas or quotes"));
            }
            if !(f.scale > 0.0) {
                return Err(ctx("scale must be positive"));
            }
            if let Some(g) = f.gamma {
                if !(0.0..=1.0).contains(&g) {
                    return Err(ctx("gamma must lie in [0, 1]"));
                }
            }
            if let Some(r) = f.radius {
                if !(r > 0.0) {
                    return Err(ctx("radius must be positive"));
                }
            }
            if f.rejuvenation < 0.0 {
                return Err(ctx("rejuvenation must be non-negative"));
            }
            let needs_radius = matches!(f.method, Method::Lenkf)
                || (f.is_gaussian_mixture() && f.family == FamilyName::Localized);
            if needs_radius && f.radius.is_none() {
                return Err(ctx("a localization radius is required"));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let interval = self.experiment.interval;
        let spec = match self.model.kind {
            ModelName::Lorenz63 => {
                if self.model.dimension.is_some_and(|d| d != 3) || self.model.forcing.is_some() {
                    return Err(Error::Config("lorenz63 takes no dimension or forcing".into()));
                }
                ModelSpec::lorenz63(interval)
            }
            ModelName::Lorenz96 => ModelSpec::lorenz96(
                self.model.dimension.unwrap_or(40),
                self.model.forcing.unwrap_or(8.0),
                interval,
            )?,
        };
        Ok(spec.with_step(self.experiment.step.unwrap_or(DEFAULT_STEP)))
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        let n = self.model_spec()?.dimension();
        let obs = &self.observation;
        let operator = match obs.operator {
            OperatorName::Distance => {
                if self.model.kind != ModelName::Lorenz63 {
                    return Err(Error::Config("the distance operator needs lorenz63".into()));
                }
                ObservationOperator::L63Distance
            }
            OperatorName::Pointwise => {
                let omega = obs
                    .omega
                    .ok_or_else(|| Error::Config("the pointwise operator needs omega".into()))?;
                if omega % 2 == 0 {
                    return Err(Error::Config(format!("omega must be odd, got {omega}")));
                }
                ObservationOperator::Pointwise { omega }
            }
            OperatorName::Identity => ObservationOperator::Linear(DMatrix::identity(n, n)),
        };
        let m = operator.output_dim(n);
        ObservationModel::gaussian(operator, DMatrix::identity(m, m) * obs.variance)
    }

    /// EM settings for ensemble size `members`; `batch = 0` means `S = N`.
    pub fn em_config(&self, members: usize) -> Result<EmConfig> {
        let em = &self.em;
        Ok(EmConfig {
            outer: em.outer,
            inner: em.inner,
            batch: if em.batch == 0 { members } else { em.batch },
            alpha: em.alpha,
            clip: em.clip,
        })
    }

    pub fn kernel_family(&self, filter: &FilterSpec) -> Result<KernelFamily> {
        Ok(match filter.family {
            FamilyName::Bandwidth => KernelFamily::Bandwidth,
            FamilyName::Shrinkage => KernelFamily::Shrinkage,
            FamilyName::Localized => KernelFamily::Localized {
                distances: self.model_spec()?.cyclic_distances(),
            },
        })
    }

    pub fn filter_spec(&self, name: &str) -> Result<&FilterSpec> {
        self.filter
            .get(name)
            .ok_or_else(|| Error::Config(format!("no filter named {name}")))
    }

    /// Shifts every seed by `offset`.
    pub fn offset_seeds(&mut self, offset: u64) {
        for s in &mut self.experiment.seeds {
            *s = s.wrapping_add(offset);
        }
    }
}

impl FilterSpec {
    fn name_clash(&self, name: &str) -> bool {
        name.is_empty() || name.contains([',', '"', '\n'])
    }
}
