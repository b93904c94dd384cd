//! Calibration of spatially heterogeneous reaction-diffusion tumor models from
//! time-series tumor-fraction images, with Laplace-approximate posteriors and
//! posterior-predictive shape uncertainty.

pub mod baselines;
pub mod config;
pub mod error;
pub mod formats;
pub mod forward;
pub mod grid;
pub mod hypersearch;
pub mod inversion;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod prior;
pub mod registration;

pub use error::{Error, Result};
pub use forward::{ParameterFields, SolverConfig, Trajectory};
pub use grid::{BinaryMask, Grid, Region, RegionLabels, ScalarField};
pub use config::{Method, PipelineConfig};
