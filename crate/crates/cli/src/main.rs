//! `prolif`: tumor proliferation scoring from whole-slide images.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected internal failure |
//! | 2 | bad command line |
//! | 3 | invalid argument or configuration value |
//! | 4 | file system error or missing tile |
//! | 5 | malformed input file |
//! | 6 | degenerate data (blank slide, single-stain patch, constant labels) |
//! | 7 | detector plug-in failure |

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prolif_core::pipeline::{DetectorChoice, PipelineConfig};
use prolif_core::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "prolif", version, about = "Tumor proliferation scoring for whole-slide histopathology")]
struct Cli {
    /// Worker threads for per-patch and per-slide work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Repeat for more log output (info, then debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Command,
}

/// Pipeline configuration: a JSON file, then individual flag overrides.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Pipeline config JSON; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Level-0 resolution in µm/px, replacing the manifest value.
    #[arg(long, global = true)]
    mpp: Option<f64>,

    /// Longest side of the tissue-detection thumbnail.
    #[arg(long, global = true)]
    thumb_max_side: Option<usize>,

    /// Tissue mask dilation radius in thumbnail pixels.
    #[arg(long, global = true)]
    dilation_radius: Option<usize>,

    /// Patch area in mm² (2.0 is ten high-power fields).
    #[arg(long, global = true)]
    patch_area_mm2: Option<f64>,

    /// Number of ROIs kept per slide.
    #[arg(long, global = true)]
    top_k: Option<usize>,

    /// Stain profile JSON to normalize towards.
    #[arg(long, global = true)]
    target_profile: Option<PathBuf>,

    /// Trained detector JSON from `train-detector`.
    #[arg(long, global = true, conflicts_with = "plugin")]
    detector: Option<PathBuf>,

    /// External detector command, split on whitespace.
    #[arg(long, global = true)]
    plugin: Option<String>,

    /// Detection probability threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Non-maximum suppression radius in pixels.
    #[arg(long, global = true)]
    nms_radius: Option<f64>,

    /// Distance in pixels within which a detection matches an annotation.
    #[arg(long, global = true)]
    match_radius: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> prolif_core::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.mpp {
            cfg.mpp_override = Some(v);
        }
        if let Some(v) = self.thumb_max_side {
            cfg.tissue.thumb_max_side = v;
        }
        if let Some(v) = self.dilation_radius {
            cfg.tissue.dilation_radius = v;
        }
        if let Some(v) = self.patch_area_mm2 {
            cfg.patches.area_mm2 = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = &self.target_profile {
            cfg.target_profile = Some(v.clone());
        }
        if let Some(v) = &self.detector {
            cfg.detector = DetectorChoice::Learned { path: v.clone() };
        }
        if let Some(v) = &self.plugin {
            cfg.detector = DetectorChoice::Plugin {
                command: v.split_whitespace().map(String::from).collect(),
                geometry: Default::default(),
            };
        }
        if let Some(v) = self.threshold {
            cfg.detection.threshold = v;
        }
        if let Some(v) = self.nms_radius {
            cfg.detection.nms_radius = v;
        }
        if let Some(v) = self.match_radius {
            cfg.match_radius = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Svc,
    Svr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    Kappa,
    Spearman,
    NegRmse,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic slide pyramid with ground truth.
    Synth(commands::SynthArgs),
    /// Detect tissue on a thumbnail and write the mask and blobs.
    Tissue(commands::SlideRun),
    /// Lay out candidate patches over the tissue blobs.
    Patches(commands::SlideRun),
    /// Count nuclei per patch and keep the top K as ROIs.
    Rois(commands::SlideRun),
    /// Stain-normalize the ROIs.
    Normalize(commands::SlideRun),
    /// Detect mitoses in the normalized ROIs.
    Detect(commands::RunOnly),
    /// Print the score map of one patch (also usable as a detector plug-in).
    ScoreMap(commands::ScoreMapArgs),
    /// List detections of the configured detector that match no annotated mitosis.
    MineNegatives(commands::MineArgs),
    /// Train the window detector with one round of false-positive mining.
    TrainDetector(commands::TrainDetectorArgs),
    /// Compute the 21 slide features from detected ROIs.
    Featurize(commands::FeaturizeArgs),
    /// Train the 3-class mitosis score classifier.
    TrainSvc(commands::TrainArgs),
    /// Train the continuous proliferation score regressor.
    TrainSvr(commands::TrainArgs),
    /// Cross-validate one feature subset and C.
    Cv(commands::CvArgs),
    /// Cross-validate every candidate subset and C and report the best.
    FeatureSearch(commands::SearchArgs),
    /// Score a featurized run and write its result.
    Predict(commands::PredictArgs),
    /// Compare run results with reference labels and annotations.
    Evaluate(commands::EvaluateArgs),
    /// Run every stage on one slide.
    Pipeline(commands::PipelineArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Usage(_) => 2,
        CliError::Core(e) => match e.root() {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 3,
            Error::Io { .. } | Error::MissingTile(_) => 4,
            Error::Format { .. } => 5,
            Error::DegenerateHistogram
            | Error::TooFewPixels { .. }
            | Error::DegenerateStain(_)
            | Error::DegenerateMarginals
            | Error::Degenerate(_) => 6,
            Error::Plugin(_) => 7,
            Error::Stage { .. } => 1,
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = || cli.config.resolve().map_err(CliError::from);
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Tissue(a) => commands::tissue(a, &cfg()?),
        Command::Patches(a) => commands::patches(a, &cfg()?),
        Command::Rois(a) => commands::rois(a, &cfg()?),
        Command::Normalize(a) => commands::normalize(a, &cfg()?),
        Command::Detect(a) => commands::detect(a, &cfg()?),
        Command::ScoreMap(a) => commands::score_map(a, &cfg()?),
        Command::MineNegatives(a) => commands::mine_negatives(a, &cfg()?),
        Command::TrainDetector(a) => commands::train_detector(a),
        Command::Featurize(a) => commands::featurize(a, &cfg()?),
        Command::TrainSvc(a) => commands::train(a, ModelKind::Svc, &cfg()?),
        Command::TrainSvr(a) => commands::train(a, ModelKind::Svr, &cfg()?),
        Command::Cv(a) => commands::cv(a, &cfg()?),
        Command::FeatureSearch(a) => commands::feature_search(a, &cfg()?),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a, &cfg()?),
        Command::Pipeline(a) => commands::pipeline(a, &cfg()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
