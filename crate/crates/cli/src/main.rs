//! `cwgan`: data generation, training, evaluation and schedule inspection.
//!
//! Exit status is 0 on success, 1 when the invocation or config is invalid
//! and 2 when a run fails after validation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Output directory override; the `--out` flag takes precedence.
pub const OUTPUT_DIR_ENV: &str = "CWGAN_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "cwgan", version, about = "Conditional Wasserstein GAN experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set loss.lambda_lp=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every random stream; replaces the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `$CWGAN_OUTPUT_DIR`, then `runs/<command>`).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample the conditioning augmentation instead of using its mean.
    #[arg(long)]
    pub sample_ca: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic captioned dataset (train split, optional test split).
    MakeSynthetic {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        embedding_dim: Option<usize>,
        /// Classes moved to a disjoint test split.
        #[arg(long, default_value_t = 0)]
        test_classes: usize,
    },
    /// Train the configured model.
    Train,
    /// Inception Score of generated samples under a classifier trained on the
    /// configured dataset.
    Evaluate {
        #[command(flatten)]
        model: CheckpointArgs,
        #[arg(long, default_value_t = cwgan::evaluation::DESK_SAMPLE_COUNT)]
        samples: usize,
        #[arg(long, default_value_t = cwgan::evaluation::DEFAULT_SPLITS)]
        splits: usize,
        #[arg(long, default_value_t = 8)]
        classifier_epochs: usize,
    },
    /// Generate a mosaic of samples for random captions.
    Sample {
        #[command(flatten)]
        model: CheckpointArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
    /// Sweep between caption embeddings of two classes, one row per pair.
    Interpolate {
        #[command(flatten)]
        model: CheckpointArgs,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
    },
    /// Pair generated samples with their nearest training images.
    Nn {
        #[command(flatten)]
        model: CheckpointArgs,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Print the progressive phase table as tab-separated values.
    InspectSchedule {
        /// Also report the schedule cursor after this many images.
        #[arg(long, value_name = "IMAGES")]
        probe: Vec<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeSynthetic { .. } => "make-synthetic",
            Command::Train => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Sample { .. } => "sample",
            Command::Interpolate { .. } => "interpolate",
            Command::Nn { .. } => "nn",
            Command::InspectSchedule { .. } => "inspect-schedule",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
