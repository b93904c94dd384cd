//! Top-level configuration for a calibration run. Every section has working defaults,
//! so an empty JSON object is a complete configuration.

use serde::{Deserialize, Serialize};

use crate::baselines::PcpConfig;
use crate::error::{Error, Result};
use crate::forward::SolverConfig;
use crate::hypersearch::SearchSpace;
use crate::inversion::{GhepConfig, NewtonConfig};
use crate::metrics::MetricsConfig;
use crate::phantom::PhantomSpec;
use crate::prior::RegionHyper;
use crate::registration::DemonsParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Spatially varying fields under the region-wise SPDE prior.
    #[default]
    Bayes,
    /// Same inversion with GM/WM statistics averaged into one region.
    Shp,
    /// Four piecewise-constant scalars sampled by MCMC.
    Pcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig { samples: 200, seed: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSamplingConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for PriorSamplingConfig {
    fn default() -> Self {
        PriorSamplingConfig { samples: 4, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub method: Method,
    pub hyper: RegionHyper,
    pub noise_variance: f64,
    /// Observation days used for training; `None` holds out the last day.
    pub training_days: Option<Vec<f64>>,
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
    pub ghep: GhepConfig,
    /// Monte Carlo samples for posterior variance fields; 0 computes them exactly.
    pub variance_samples: usize,
    pub prediction: PredictionConfig,
    pub metrics: MetricsConfig,
    pub prior_sampling: PriorSamplingConfig,
    pub phantom: PhantomSpec,
    /// Seed of the prior draw used as the phantom's true parameter fields.
    pub truth_seed: u64,
    pub demons: DemonsParams,
    pub pcp: PcpConfig,
    pub search: SearchSpace,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Bayes,
            hyper: RegionHyper::default(),
            noise_variance: 3.9e-3,
            training_days: None,
            solver: SolverConfig::default(),
            newton: NewtonConfig::default(),
            ghep: GhepConfig::default(),
            variance_samples: 0,
            prediction: PredictionConfig::default(),
            metrics: MetricsConfig::default(),
            prior_sampling: PriorSamplingConfig::default(),
            phantom: PhantomSpec::default(),
            truth_seed: 11,
            demons: DemonsParams::default(),
            pcp: PcpConfig::default(),
            search: SearchSpace::default(),
        }
    }
}

impl PipelineConfig {
    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_variance must be positive, got {}", self.noise_variance)));
        }
        if !(self.solver.dt > 0.0 && self.solver.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("solver.dt must be positive, got {}", self.solver.dt)));
        }
        self.newton.validate()?;
        if !(self.metrics.cutoff > 0.0 && self.metrics.cutoff < 1.0) {
            return Err(Error::InvalidArgument(format!("metrics.cutoff must lie in (0, 1), got {}", self.metrics.cutoff)));
        }
        self.phantom.validate()?;
        self.search.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_rat_brain_estimates() {
        let c = PipelineConfig::default();
        assert_eq!(c.hyper.log_d.gm.rho, 6.0);
        assert_eq!(c.hyper.log_d.wm.rho, 12.0);
        assert_eq!(c.hyper.rho_int, Some(0.6));
        assert_eq!(c.noise_variance, 3.9e-3);
        assert_eq!(c.hyper.log_d.gm.mean, -0.9937);
        assert_eq!(c.hyper.log_d.gm.variance, 0.2336);
        c.validate().unwrap();
    }
}
