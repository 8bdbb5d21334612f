//! `kevs`: density-rejection VAT segmentation, thresholding baselines, evaluation
//! and statistics from the command line.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kevs::density::BandwidthMode;
use kevs::metrics::{MetricKind, WilcoxonMethod};
use kevs::pipeline::{BoundsMode, ThresholdRange};
use kevs::Role;

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "kevs", author, version, about, long_about = None)]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "KEVS_THREADS")]
    threads: Option<usize>,

    /// TOML file with `threads`, `[pipeline]` and `[metrics]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment VAT by rejecting low-density cavity voxels.
    Segment(SegmentArgs),
    /// Segment VAT with a fixed HU window.
    Baseline(BaselineArgs),
    /// Score a predicted mask against ground truth.
    Evaluate(EvaluateArgs),
    /// One-sided Wilcoxon signed-rank test on paired per-slice tables.
    Compare(CompareArgs),
    /// Mean and standard deviation per method over per-slice tables.
    Summarize(SummarizeArgs),
    /// Write synthetic phantom cases with hidden VAT ground truth.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub ct: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// JSON file mapping roles to label values.
    #[arg(long)]
    pub schema: PathBuf,
    /// Input axis that is the axial (z) axis.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub z_axis: Option<u8>,
    /// `full` (whole cavity) or `lumbar` (z-range of L1..L5).
    #[arg(long)]
    pub bounds: Option<BoundsMode>,
    /// Restrict the excluded organs to these roles (repeatable).
    #[arg(long = "organ")]
    pub organs: Vec<Role>,
    /// Output mask (.nii or .nii.gz).
    #[arg(long)]
    pub out: PathBuf,
    /// Run manifest path [default: next to --out].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub reject_fraction: Option<f64>,
    #[arg(long)]
    pub erosion_fraction: Option<f64>,
    /// `scott` (n^-1/5 in HU) or `scott-sigma` (sigma * n^-1/5).
    #[arg(long)]
    pub bandwidth_mode: Option<BandwidthMode>,
    /// Write the fitted density table as JSON.
    #[arg(long)]
    pub dump_kde: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// HU window `lo:hi`, e.g. `-190:-30`.
    #[arg(long, allow_hyphen_values = true)]
    pub range: ThresholdRange,
    /// Threshold only the cavity with organs removed.
    #[arg(long)]
    pub organ_free: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Label map for organ analyses and lumbar bounds.
    #[arg(long, requires = "schema")]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub bounds: Option<BoundsMode>,
    /// Per-slice CSV (scan_id, z, method, dice, nsd, precision, recall).
    #[arg(long)]
    pub per_slice: Option<PathBuf>,
    /// `scan_id` column [default: file name of --gt].
    #[arg(long)]
    pub scan_id: Option<String>,
    /// `method` column.
    #[arg(long, default_value = "pred")]
    pub method: String,
    /// NSD tolerance in mm.
    #[arg(long, conflicts_with = "nsd_tau_voxels")]
    pub nsd_tau: Option<f64>,
    /// NSD tolerance in voxels instead of mm.
    #[arg(long)]
    pub nsd_tau_voxels: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Alternative {
    AGreater,
    BGreater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestMethod {
    Auto,
    Exact,
    Normal,
}

impl From<TestMethod> for WilcoxonMethod {
    fn from(m: TestMethod) -> Self {
        match m {
            TestMethod::Auto => WilcoxonMethod::Auto,
            TestMethod::Exact => WilcoxonMethod::Exact,
            TestMethod::Normal => WilcoxonMethod::Normal,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "dice")]
    pub metric: MetricKind,
    #[arg(long, value_enum, default_value_t = Alternative::AGreater)]
    pub alternative: Alternative,
    #[arg(long, value_enum, default_value_t = TestMethod::Auto)]
    pub test: TestMethod,
    /// Use only rows of this method from --a.
    #[arg(long)]
    pub method_a: Option<String>,
    /// Use only rows of this method from --b.
    #[arg(long)]
    pub method_b: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Per-slice CSV files.
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Seeds (comma separated for a suite).
    #[arg(long, value_delimiter = ',', default_value = "42")]
    pub seed: Vec<u64>,
    /// Noise scales (comma separated for a suite).
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub noise: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Full phantom specification as JSON; geometry flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Grid size `X,Y,Z`; anatomy is rescaled to fit.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Isotropic voxel spacing in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Body ellipse semi-axes `A,B` in mm.
    #[arg(long, value_delimiter = ',')]
    pub body_semi_axes: Option<Vec<f64>>,
    #[arg(long)]
    pub sat_thickness: Option<f64>,
    #[arg(long)]
    pub organs: Option<usize>,
    /// Organ radius range `lo,hi` in mm.
    #[arg(long, value_delimiter = ',')]
    pub organ_radius: Option<Vec<f64>>,
    #[arg(long)]
    pub vat_blobs: Option<usize>,
}

fn init_threads(cli_threads: Option<usize>, file: &FileConfig) -> CliResult<()> {
    let Some(n) = cli_threads.or(file.threads) else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::Invalid("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Invalid(format!("cannot start {n} worker threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    init_threads(cli.threads, &file)?;
    match cli.command {
        Command::Segment(a) => commands::segment(a, &file),
        Command::Baseline(a) => commands::baseline(a, &file),
        Command::Evaluate(a) => commands::evaluate(a, &file),
        Command::Compare(a) => commands::compare(a),
        Command::Summarize(a) => commands::summarize(a),
        Command::Phantom(a) => commands::phantom(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
