//! `busnet` command line: prepare, train, evaluate, compare and predict.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use busnet::dataset::Split;
use busnet::models::ModelKind;
use busnet::nn::optim::OptimizerKind;
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
/// Finished, but some inputs could not be processed.
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PARTIAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn valid_kinds() -> String {
    ModelKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|_| format!("unknown model `{s}`; valid models: {}", valid_kinds()))
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer `{s}`; valid optimizers: adam, sgd")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "busnet", version, about = "Breast-ultrasound image classification")]
pub struct Cli {
    /// Directory for the manifest, checkpoints and reports [default: work]
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialization and batch order [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a class-foldered corpus and write a stratified split manifest
    Prepare(PrepareArgs),
    /// Train one model on the prepared split
    Train(TrainArgs),
    /// Score a split with a trained checkpoint and write a report
    Evaluate(EvaluateArgs),
    /// Tabulate the reports of several models
    Compare(CompareArgs),
    /// Class probabilities for an image or a directory of images
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Root holding one sub-directory of images per class
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub test_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// resnet50, mobilenet, vgg16 or custom_cnn
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// adam or sgd
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Comma-separated loss weight per class, in label order
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
    /// Train the backbone too
    #[arg(long)]
    pub no_freeze: bool,
    #[arg(long)]
    pub head_units: Option<usize>,
    /// Seeded random backbone instead of pretrained weights
    #[arg(long)]
    pub random_init_backbone: bool,
    /// Directory with `<backbone>.safetensors` files
    #[arg(long)]
    pub weights_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    /// Checkpoint directory [default: <work-dir>/<model>/best.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weights_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated models [default: every model with a report]
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub models: Option<Vec<ModelKind>>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images
    pub input: PathBuf,
    #[arg(long)]
    pub weights_cache: Option<PathBuf>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
