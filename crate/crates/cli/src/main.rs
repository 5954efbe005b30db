//! `awe`: synthesize corpora, train and evaluate acoustic word embeddings,
//! and check gradients.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] awe_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// Configuration problems reported by the core library count as usage
    /// errors.
    pub fn config(e: awe_core::Error) -> Self {
        match e {
            awe_core::Error::Config(m) | awe_core::Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(awe_core::Error::Config(_)) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "awe", version, about = "Acoustic word embeddings with phonological and semantic supervision")]
pub struct Cli {
    /// TOML file with [features], [synth], [model], [train], [eval] and [check_grad] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (corpus for `synth`, logs and checkpoints for `train`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Zero out wall-clock columns so repeated runs compare bitwise.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and print per-split statistics.
    Synth {
        /// Output directory; defaults to --run-dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write `best.ckpt` and `epochs.csv`.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// form_only, meaning_only, form_meaning or contrastive.
        #[arg(long)]
        loss_mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Reuse a run directory that already holds results.
        #[arg(long)]
        force: bool,
    },
    /// Embed one split with a checkpoint and print its mAP as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// train, valid or test.
        #[arg(long)]
        split: Option<String>,
        /// Also write the embeddings as TSV.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every loss mode on a tiny model.
    CheckGrad {
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
