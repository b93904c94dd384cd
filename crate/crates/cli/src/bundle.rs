//! On-disk layout of data bundles and posterior directories.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tumorcal::formats::{read_grid, read_labels, read_scalar_field};
use tumorcal::phantom::ObservationSeries;
use tumorcal::prior::RegionHyper;
use tumorcal::{Grid, Method, RegionLabels, ScalarField};

use crate::config::read_json;
use crate::failure::{CliResult, Failure};
use crate::output::Staging;

pub const MASK: &str = "mask.txt";
pub const LABELS: &str = "labels.txt";
pub const U0: &str = "u0.txt";
pub const OBSERVATIONS: &str = "observations.json";
pub const POSTERIOR: &str = "posterior.json";

/// `5` → `"5"`, `2.5` → `"2.5"`.
pub fn day_tag(day: f64) -> String {
    format!("{day}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationIndex {
    pub start_day: f64,
    pub days: Vec<f64>,
    /// Observation files, relative to the bundle.
    pub files: Vec<String>,
    pub noise_variance: f64,
    /// Noiseless states on the same days, when the bundle is synthetic.
    #[serde(default)]
    pub clean_files: Vec<String>,
}

/// Everything a calibration needs from a subject.
pub struct DataBundle {
    pub grid: Arc<Grid>,
    pub labels: RegionLabels,
    pub u0: ScalarField,
    pub start_day: f64,
    pub observations: ObservationSeries,
    pub clean: Option<ObservationSeries>,
}

impl DataBundle {
    /// Read the bundle at `dir` (relative to the run directory), recording input digests.
    pub fn load(st: &mut Staging, dir: &Path, labels_override: Option<&Path>) -> CliResult<Self> {
        let grid = Arc::new(read_grid(st.input(&dir.join(MASK))?)?);
        let labels_rel = labels_override.map(Path::to_path_buf).unwrap_or_else(|| dir.join(LABELS));
        let labels = read_labels(st.input(&labels_rel)?, &grid)?;
        let u0 = read_scalar_field(st.input(&dir.join(U0))?, &grid)?;
        let index: ObservationIndex = read_json(&st.input(&dir.join(OBSERVATIONS))?)?;
        if index.files.len() != index.days.len() {
            return Err(Failure::validation("InvalidBundle", "observation days and files differ in number"));
        }
        let mut read_series = |files: &[String]| -> CliResult<ObservationSeries> {
            let fields = files
                .iter()
                .map(|f| Ok(read_scalar_field(st.input(&dir.join(f))?, &grid)?))
                .collect::<CliResult<Vec<_>>>()?;
            Ok(ObservationSeries::new(index.days.clone(), fields)?)
        };
        let observations = read_series(&index.files)?;
        let clean = if index.clean_files.len() == index.days.len() { Some(read_series(&index.clean_files)?) } else { None };
        Ok(DataBundle { grid, labels, u0, start_day: index.start_day, observations, clean })
    }

    /// Indices of the training days: the requested days, or every day but the last.
    pub fn training_indices(&self, requested: Option<&[f64]>) -> CliResult<Vec<usize>> {
        let days = &self.observations.days;
        match requested {
            Some(req) => req
                .iter()
                .map(|d| {
                    days.iter().position(|x| x == d).ok_or_else(|| {
                        Failure::validation("UnknownDay", &format!("training day {d} is not an observation day"))
                    })
                })
                .collect(),
            None if days.len() >= 2 => Ok((0..days.len() - 1).collect()),
            None => Err(Failure::validation("TooFewDays", "need at least two observation days to hold one out")),
        }
    }
}

/// Metadata that lets `predict` rebuild a posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorInfo {
    pub method: Method,
    /// Data bundle and labels file, relative to the run directory.
    pub data: PathBuf,
    pub labels: PathBuf,
    /// Prior actually used (already homogenized for SHP).
    pub hyper: RegionHyper,
    pub noise_variance: f64,
    pub training_days: Vec<f64>,
    pub rank: usize,
    /// Burn-in fraction of the stored chain (PCP only).
    pub burn_in: Option<f64>,
}

pub fn eigenvector_files(i: usize) -> (String, String) {
    (format!("eigenvectors/vec_{i:03}_log_d.txt"), format!("eigenvectors/vec_{i:03}_log_g.txt"))
}
