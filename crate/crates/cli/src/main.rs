//! vesselseg command-line front end.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ValidationError;

#[derive(Debug, Parser)]
#[command(name = "vesselseg", version, about = "Volumetric vessel segmentation pipeline")]
struct Cli {
    /// Pipeline config (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Slice-wise motion correction of a raw stack.
    Register(RegisterArgs),
    /// Percentile normalization and optional isotropic resampling.
    Preprocess(PreprocessArgs),
    /// Train a network on normalized images and ground-truth masks.
    Train(TrainArgs),
    /// Segment a normalized image and post-process the result.
    Segment(SegmentArgs),
    /// Centerline skeleton and vessel graph of a segmentation.
    Centerline(CenterlineArgs),
    /// Centerlines, per-segment morphometry and group statistics.
    Analyze(AnalyzeArgs),
    /// Compare a segmentation with ground truth.
    Evaluate(EvaluateArgs),
    /// Generate synthetic phantom bundles.
    Phantom(PhantomArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    lo_pct: Option<f64>,
    #[arg(long)]
    hi_pct: Option<f64>,
    /// Isotropic target spacing in µm.
    #[arg(long)]
    spacing: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Normalized training image; repeat and pair with --gt.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    #[arg(long = "gt", required = true)]
    gts: Vec<PathBuf>,
    /// Validation images; without them validation patches come from the
    /// training volumes under an independent seed.
    #[arg(long = "val-image")]
    val_images: Vec<PathBuf>,
    #[arg(long = "val-gt")]
    val_gts: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    descriptor: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    min_component: Option<usize>,
    /// Stochastic passes for the uncertainty map (0 disables it).
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct CenterlineArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Segmentation; repeat for several volumes.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Group label per input (defaults to the file stem).
    #[arg(long = "group")]
    groups: Vec<String>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    capillary_max_diameter: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Also extract both centerlines and report their distance.
    #[arg(long)]
    centerline: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of bundles; more than one writes `phantom_NNN` subdirectories
    /// with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Volume size as X,Y,Z.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    tubes: Option<usize>,
    #[arg(long)]
    motion_amplitude: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use vesselseg::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::ArchSyntax(_) | E::ShapeInference(_) | E::UnsupportedFormat(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
