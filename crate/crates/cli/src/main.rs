//! Pipeline driver.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures during optimization. Relative output paths are
//! resolved under `$HOIDET_OUT_ROOT` when that variable is set.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

pub const OUT_ROOT_ENV: &str = "HOIDET_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<hoidet_core::config::ConfigError> for CliError {
    fn from(e: hoidet_core::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<hoidet_core::data::DataError> for CliError {
    fn from(e: hoidet_core::data::DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<hoidet_core::model::ModelError> for CliError {
    fn from(e: hoidet_core::model::ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<hoidet_core::train::TrainError> for CliError {
    fn from(e: hoidet_core::train::TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hoidet",
    version,
    about = "Human-object interaction detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: annotations, class table and images.
    GenerateData {
        /// TOML file with scene-generation parameters.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Main-phase training: all parameters update under uniform weights.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an earlier main-phase checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decoupled fine-tuning: frozen extractor, re-weighted class losses.
    FinetuneReweight {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Main-phase checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference over a dataset directory and write predictions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with annotations.jsonl and images/.
        #[arg(long)]
        images: PathBuf,
        /// Predictions file to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional run configuration supplying suppression settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth and write a report.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        /// Ground-truth annotations file.
        #[arg(long)]
        gt: PathBuf,
        /// Class table with training counts and rarity flags.
        #[arg(long)]
        classes: PathBuf,
        /// Report file to write.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write cross-attention heat-maps for the top-scored query.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Directory for the two map images.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Relative output paths land under `$HOIDET_OUT_ROOT` when it is set.
pub fn resolve_out(path: &PathBuf) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            if !root.is_empty() {
                return PathBuf::from(root).join(path);
            }
        }
    }
    path.clone()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { spec, seed, out } => commands::generate_data(&spec, seed, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&config, &data, &out, resume.as_deref()),
        Command::FinetuneReweight {
            config,
            data,
            checkpoint,
            out,
        } => commands::finetune_reweight(&config, &data, &checkpoint, &out),
        Command::Infer {
            checkpoint,
            images,
            out,
            config,
        } => commands::infer(&checkpoint, &images, &out, config.as_deref()),
        Command::Eval {
            preds,
            gt,
            classes,
            report,
        } => commands::eval(&preds, &gt, &classes, &report),
        Command::DumpAttention {
            checkpoint,
            image,
            out,
        } => commands::dump_attention(&checkpoint, &image, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
