//! Config-driven experiment runner.
//!
//! ```text
//! dreg-lab <toy-snr|train|bias-test> --config <path> [--seed N] [--out DIR]
//! ```
//!
//! Exit status is 0 on success, 1 for configuration errors and 2 for
//! failures while running.

pub mod config;
mod output;
pub mod toy_snr;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use thiserror::Error;

pub use config::{Experiment, ExperimentConfig, ModelKind};
pub use output::{write_atomic, write_csv};

use crate::models::ToyModel;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub(crate) fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    ToySnr,
    Train,
    BiasTest,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::ToySnr => Experiment::ToySnr,
            Command::Train => Experiment::Train,
            Command::BiasTest => Experiment::BiasTest,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dreg-lab", version, about = "Gradient-estimator laboratory for importance-weighted objectives")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML experiment configuration (a run manifest also works).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let wanted = Experiment::from(args.command);
    if cfg.experiment != wanted {
        return Err(CliError::Config(format!(
            "command is {wanted} but the config describes {}",
            cfg.experiment
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    cfg.run = None;
    Ok(cfg)
}

/// Runs the experiment and writes its outputs and manifest.
pub fn execute(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output).map_err(runtime)?;
    match cfg.experiment {
        Experiment::ToySnr => toy_snr::run(cfg)?,
        Experiment::Train => train::run(cfg)?,
        Experiment::BiasTest => bias_test::run(cfg)?,
    }
    write_atomic(&cfg.output.join("manifest.toml"), cfg.manifest()?.as_bytes())
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve(&args).and_then(|cfg| execute(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dreg-lab: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn toy_model(cfg: &ExperimentConfig) -> ToyModel {
    let d = cfg.model.latent_dim;
    let base = match cfg.model.kind {
        ModelKind::ToyTied => ToyModel::tied(d),
        _ => ToyModel::new(d),
    };
    base.with_q_variance(cfg.model.q_variance)
}

/// Packs a domain tag, a trial index and a sample count into one noise
/// stream id so that every (experiment part, trial, K) reads its own stream.
pub(crate) fn stream_id(domain: u8, trial: usize, k: usize) -> u64 {
    ((domain as u64) << 56) | ((trial as u64 & 0xff_ffff) << 32) | (k as u64 & 0xffff_ffff)
}
