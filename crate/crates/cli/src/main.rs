//! `nuvision`: generate events, split, train both classifiers, predict,
//! evaluate and compare.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or hash
//! mismatch, 4 runtime failure.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "nuvision", version, about = "Neutrino interaction classification pipeline")]
pub struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelKind>,
    /// Event count for `gen`, a cap on records for training and inference,
    /// measured calls for `bench`.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Cnn,
    Vlm,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Vlm => "vlm",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset of pixel-map pairs into `--out`.
    Gen,
    /// Write a stratified train/val/test split of a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the Siamese CNN; `--out` is the run directory.
    TrainCnn(DataArgs),
    /// Fine-tune adapters on the VLM backbone; `--out` is the run directory.
    FinetuneVlm(DataArgs),
    /// Predict the test split, writing JSON lines to `--out`.
    Infer(ModelArgs),
    /// Compute metrics from a predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Render the comparison of two metrics files into `--out`.
    Report {
        first: PathBuf,
        second: PathBuf,
    },
    /// Profile latency and memory of a trained model.
    Bench(ModelArgs),
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Split file; defaults to `split.json` inside the dataset directory.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
