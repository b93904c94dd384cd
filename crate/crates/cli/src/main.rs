mod bundle;
mod commands;
mod config;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "tumorcal", version, about = "Bayesian calibration of reaction-diffusion tumor growth models")]
pub struct Cli {
    /// Directory every input and output path is relative to.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "TUMORCAL_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Pipeline configuration (JSON); defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory name inside the run directory (defaults to the subcommand name).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Bayes,
    Shp,
    Pcp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic brain with tumor observations, atlas and truth fields.
    Phantom {
        #[command(flatten)]
        out: OutArg,
    },
    /// Register the atlas onto a subject image and transfer its tissue labels.
    Segment {
        #[arg(long, default_value = "phantom/subject_image.txt")]
        subject: PathBuf,
        #[arg(long, default_value = "phantom/atlas_image.txt")]
        atlas: PathBuf,
        #[arg(long, default_value = "phantom/atlas_labels.txt")]
        atlas_labels: PathBuf,
        #[arg(long, default_value = "phantom/mask.txt")]
        mask: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Draw samples from the region-wise prior and write its pointwise variance.
    SamplePrior {
        #[arg(long, default_value = "phantom/mask.txt")]
        mask: PathBuf,
        #[arg(long, default_value = "phantom/labels.txt")]
        labels: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the tumor model forward from an initial state.
    Forward {
        #[arg(long, default_value = "phantom/mask.txt")]
        mask: PathBuf,
        #[arg(long, default_value = "phantom/truth_log_d.txt")]
        log_d: PathBuf,
        #[arg(long, default_value = "phantom/truth_log_g.txt")]
        log_g: PathBuf,
        #[arg(long, default_value = "phantom/u0.txt")]
        u0: PathBuf,
        /// Comma-separated output days; the first is the day of the initial state.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        days: Vec<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Calibrate the model to a data bundle.
    Calibrate {
        /// Data bundle (mask, labels, initial state, observations).
        #[arg(long, default_value = "phantom")]
        data: PathBuf,
        /// Replace the bundle's labels, e.g. with a `segment` result.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Overrides the configured method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Forecast beyond the training window with the MAP and posterior samples.
    Predict {
        /// Output directory of a `calibrate` run.
        #[arg(long, default_value = "calibrate")]
        posterior: PathBuf,
        /// Comma-separated forecast days (defaults to the held-out observation days).
        #[arg(long, value_delimiter = ',')]
        horizon: Option<Vec<f64>>,
        /// Posterior samples to propagate (overrides `prediction.samples`).
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compare a model field against data, optionally with a forecast ensemble.
    Metrics {
        #[arg(long, default_value = "phantom/mask.txt")]
        mask: PathBuf,
        #[arg(long, default_value = "predict/map_day_5.txt")]
        model: PathBuf,
        #[arg(long, default_value = "phantom/obs_day_5.txt")]
        data: PathBuf,
        /// Ensemble directory written by `predict`.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Forecast day whose ensemble members are scored.
        #[arg(long)]
        day: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cross-validated grid search over correlation lengths and noise level.
    Gridsearch {
        /// Comma-separated data bundles; each holds out its last observation day.
        #[arg(long, value_delimiter = ',', default_value = "phantom")]
        subjects: Vec<PathBuf>,
        /// Search-space JSON (defaults to the `search` section of the config).
        #[arg(long)]
        space: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Segment { .. } => "segment",
            Command::SamplePrior { .. } => "sample-prior",
            Command::Forward { .. } => "forward",
            Command::Calibrate { .. } => "calibrate",
            Command::Predict { .. } => "predict",
            Command::Metrics { .. } => "metrics",
            Command::Gridsearch { .. } => "gridsearch",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Failure::validation("Usage", first).report();
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        return Failure::validation("Threads", &e.to_string()).report();
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
