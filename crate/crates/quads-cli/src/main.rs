//! `quads`: train, compress, inspect.
//!
//! Workflow: `synth-data` writes a deterministic labelled corpus,
//! `train-teacher` fits the reference model, `mct` runs the alternating
//! distillation/quantization pipeline and exports a packed model,
//! `ablate` sweeps initialization and strategy, `evaluate` re-scores any
//! exported model. Exit codes: 0 success, 1 user error (configuration,
//! missing files), 2 numerical failure (training diverged).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{InitArg, StrategyArg};
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Numerical(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<quads::train::TrainError> for CliError {
    fn from(e: quads::train::TrainError) -> Self {
        match e {
            quads::train::TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<quads::io::IoError> for CliError {
    fn from(e: quads::io::IoError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<quads::model::ModelError> for CliError {
    fn from(e: quads::model::ModelError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<quads::quant::QuantError> for CliError {
    fn from(e: quads::quant::QuantError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<quads::metrics::MetricsError> for CliError {
    fn from(e: quads::metrics::MetricsError) -> Self {
        CliError::User(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "quads",
    version,
    about = "Quantized-distillation training engine for compact speech-intent models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the active command (corpus, teacher or schedule seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic spoken-command corpus and its splits.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher with plain cross-entropy and checkpoint it.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Override the configured epoch budget (0 saves the initialization).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run a compression pipeline and export the packed model.
    Mct {
        #[command(flatten)]
        common: Common,
        /// Codebook bit length; 32 means full precision.
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Sweep initialization x training strategy at the configured bit lengths.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Score a packed model or checkpoint against a manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(common.config.as_deref())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::SynthData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.corpus.seed = seed;
            }
            commands::cmd_synth_data(&cfg, common.force)
        }
        Cmd::TrainTeacher { common, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.teacher.seed = seed;
            }
            commands::cmd_train_teacher(&cfg, epochs)
        }
        Cmd::Mct {
            common,
            bits,
            cycles,
            alpha,
            init,
            strategy,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.schedule.seed = seed;
            }
            if let Some(bits) = bits {
                if ![4, 8, 16, 32].contains(&bits) {
                    return Err(CliError::user(format!(
                        "--bits must be one of 4, 8, 16, 32 (got {bits})"
                    )));
                }
                cfg.schedule.bit_length = bits;
            }
            if let Some(cycles) = cycles {
                cfg.schedule.cycles = cycles;
            }
            if let Some(alpha) = alpha {
                cfg.schedule.alpha = alpha;
            }
            commands::cmd_mct(
                &cfg,
                init.unwrap_or(InitArg::Random),
                strategy.unwrap_or(StrategyArg::Mct),
            )
        }
        Cmd::Ablate { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.ablate.seeds = vec![seed];
            }
            commands::cmd_ablate(&cfg)
        }
        Cmd::Evaluate {
            common,
            model,
            manifest,
        } => {
            let cfg = load_config(&common)?;
            commands::cmd_evaluate(&cfg, &model, &manifest)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
