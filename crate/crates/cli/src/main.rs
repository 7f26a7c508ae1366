//! `provo`: command-line workflows for progressive volumetric recovery.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags or config
//! values), 1 on runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunFlags;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(provogan::Error),
}

impl From<provogan::Error> for CliError {
    fn from(e: provogan::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "provo", version, about = "Progressively volumetrized 3D MR image recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-contrast phantom dataset.
    Phantom(PhantomArgs),
    /// Train a three-stage pipeline (or a single-orientation baseline).
    Train(TrainArgs),
    /// Train all six progression orders and report their validation scores.
    OrderSearch(OrderSearchArgs),
    /// Run a trained pipeline on new data.
    Infer(InferArgs),
    /// Score predicted volumes against references.
    Eval(EvalArgs),
    /// Write a seeded variable-density sampling mask.
    Mask(MaskArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub subjects: usize,
    /// Edge length of the cubic volumes (multiple of 4).
    #[arg(long)]
    pub shape: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ellipsoids: usize,
    /// Train,val,test counts (default: about 70/10/20).
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Progression order such as ACS.
    #[arg(long)]
    pub order: Option<String>,
    /// Train a single-orientation baseline instead (only `sgan`).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Baseline orientation: A, C or S.
    #[arg(long)]
    pub orientation: Option<String>,
}

#[derive(Debug, Args)]
pub struct OrderSearchArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Orders trained concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Pipeline directory written by `train`.
    #[arg(long)]
    pub pipeline: PathBuf,
    /// Dataset manifest (file or directory) to take subjects from.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Subject ids; defaults to every subject of `--split`.
    #[arg(long)]
    pub subject: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Source volumes in the pipeline's source order (synthesis).
    #[arg(long)]
    pub source: Vec<PathBuf>,
    /// Undersampled k-space volume (reconstruction).
    #[arg(long)]
    pub kspace: Option<PathBuf>,
    /// Sampling mask of `--kspace`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output directory (dataset mode) or `.vol` file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each stage's output.
    #[arg(long)]
    pub stages: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted volume, or directory of `<subject>.vol` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference volume, or dataset manifest when `--pred` is a directory.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Reference contrast in the dataset.
    #[arg(long, default_value = "t1")]
    pub contrast: String,
    /// Subject label for single-volume evaluation.
    #[arg(long)]
    pub subject: Option<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub n1: usize,
    #[arg(long)]
    pub n2: usize,
    #[arg(long = "R")]
    pub r: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn check_device() -> Result<(), CliError> {
    match std::env::var("PROVO_DEVICE") {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(CliError::Usage(format!(
            "PROVO_DEVICE={d} is not available; only `cpu` is supported"
        ))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = check_device().and_then(|_| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::OrderSearch(a) => commands::order_search(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Mask(a) => commands::mask(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
