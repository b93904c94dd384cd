use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("brain mask has no active cells")]
    EmptyMask,
    #[error("brain mask is not 4-connected ({components} components)")]
    DisconnectedMask { components: usize },
    #[error("grey/white matter masks do not partition the brain: {0}")]
    NotAPartition(String),
    #[error("field grid does not match the context grid")]
    GridMismatch,
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry out of bounds: {0}")]
    GeometryOutOfBounds(String),
    #[error("static image has zero gradient everywhere")]
    DegenerateImage,
    #[error("unknown label value {0}")]
    UnknownLabelValue(i64),
    #[error("linear solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    LinearSolveFailure { iterations: usize, residual: f64 },
    #[error("time step error: {0}")]
    StepSize(String),
    #[error("trajectory does not match the requested linearization: {0}")]
    TrajectoryMismatch(String),
    #[error("non-positive hyperparameter: {0}")]
    NonpositiveHyper(String),
    #[error("missing hyperparameters for region {0}")]
    MissingRegionHyper(String),
    #[error("line search failed to find sufficient decrease after {backtracks} backtracks")]
    LineSearchFailure { backtracks: usize },
    #[error("non-finite cost encountered")]
    NonFiniteCost,
    #[error("randomized eigensolver: orthonormalization collapsed ({kept} of {requested} directions)")]
    RankDeficiency { kept: usize, requested: usize },
    #[error("data are degenerate: {0}")]
    DegenerateData(String),
    #[error("brain has zero area")]
    EmptyBrain,
    #[error("reference boundary is empty")]
    EmptyReference,
    #[error("no valid points for Pareto selection")]
    NoValidPoints,
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to rejected input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::LinearSolveFailure { .. }
                | Error::StepSize(_)
                | Error::LineSearchFailure { .. }
                | Error::NonFiniteCost
                | Error::RankDeficiency { .. }
                | Error::DegenerateImage
                | Error::TrajectoryMismatch(_)
        )
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
