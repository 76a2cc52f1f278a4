//! Command-line front end: training, evaluation, attention export,
//! dependency analysis and dataset preparation.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data or file I/O,
//! 4 numeric divergence, 5 shape mismatch.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cabilstm::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cabilstm",
    version,
    about = "Class-attention BiLSTM multi-label image classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write one grayscale attention map per class for an image.
    ExportAttention(ExportArgs),
    /// Conditional co-occurrence matrix of a manifest's labels.
    AnalyzeDeps(DepsArgs),
    /// Crop labelled tiles into a multi-label dataset.
    MakeDataset(MakeDatasetArgs),
    /// Generate a synthetic dataset with planted label dependencies.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for `model.ckpt` and `train_log.csv`, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Directory for `summary.csv` and `per_class.csv`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest whose class names label the output files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DepsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `cooccurrence.csv` and `cooccurrence.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel size of one matrix cell in the image.
    #[arg(long, default_value_t = 16)]
    pub cell: u32,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    /// Directory of tiles `NAME.png` with masks `NAME_mask.png` (or `.pgm`).
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long)]
    pub window: usize,
    #[arg(long)]
    pub stride: usize,
    /// Comma-separated class names; mask ID `c` is class `c`.
    #[arg(long)]
    pub classes: String,
    #[arg(long, default_value_t = cabilstm::dataio::DEFAULT_SENTINEL)]
    pub sentinel: u16,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Number of classes (at most 64 distinct looks).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Prior of every root class.
    #[arg(long, default_value_t = 0.3)]
    pub base_rate: f64,
    /// Planted pair `A:B:P(B|A):P(A|B)`, repeatable.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub visibility: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Image { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Dimension(_) => 5,
        Error::Usage(_) => 1,
    }
}

pub fn run(cli: Cli) -> cabilstm::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::ExportAttention(a) => commands::export_attention(&a),
        Command::AnalyzeDeps(a) => commands::analyze_deps(&a),
        Command::MakeDataset(a) => commands::make_dataset(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
