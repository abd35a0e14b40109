//! `stda`: config-driven synthetic-data generation, training, evaluation,
//! ablation and λ sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{apply_override, CitySpec, ExperimentConfig};
pub use error::{CliError, Result};
pub use output::{read_manifest, Manifest, Output};

#[derive(Debug, Parser)]
#[command(name = "stda", version, about = "Few-shot traffic prediction across cities")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides a configuration field, e.g. `meta.lambda=0.5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; replaces `output_dir` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every synthetic city in the configuration to disk.
    Synth,
    /// Train the configured variant for every seed.
    Train,
    /// Adapt a saved initialization to the target city and evaluate it.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Seed of the adaptation minibatches; defaults to the first
        /// configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every variant on the configured seeds.
    Ablate,
    /// Run the full variant over a list of λ values.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        lambdas: Vec<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Runs one command and returns the path of the manifest it wrote.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path, &cli.set)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Command::Sweep { lambdas } = &cli.command {
        if lambdas.is_empty() {
            return Err(CliError::Usage("the λ list is empty".into()));
        }
    }
    let mut out = Output::prepare(&cfg.output_dir, cli.force)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &mut out)?,
        Command::Train => commands::train(&cfg, &mut out)?,
        Command::Eval { checkpoint, seed } => commands::eval(&cfg, checkpoint, *seed, &mut out)?,
        Command::Ablate => commands::ablate(&cfg, &mut out)?,
        Command::Sweep { lambdas } => commands::sweep(&cfg, lambdas, &mut out)?,
    }
    out.finish(cli.command.name())
}
