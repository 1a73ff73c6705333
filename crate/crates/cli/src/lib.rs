//! Command-line driver for `dpvae`: pre-training, mixture fitting,
//! semi-supervised training, reconstruction, latent export and evaluation.
//!
//! Every command is a pure function of the config file, the dataset files
//! and the seed. Exit codes: 0 success, 1 numerical failure, 2 usage or
//! I/O error.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{DataSource, LabelBudget, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DPVAE_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Library(#[from] dpvae::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Library(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dpvae", version, about = "Infinite mixtures of variational autoencoders")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $DPVAE_OUT_DIR, then ./runs).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Labels per class, or "all".
    #[arg(long, global = true)]
    pub label_budget: Option<LabelBudget>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base VAE on all training instances.
    Pretrain,
    /// Fit the mixture by blocked Gibbs sampling, starting from the base.
    FitMixture {
        /// Base checkpoint (default: <out-dir>/base.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Continue from <out-dir>/mixture.ckpt.
        #[arg(long)]
        resume: bool,
        /// Stop after this many sweeps in total, without finalizing.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train the gated classifier and the single-head baseline over trials.
    TrainSemisup {
        /// Mixture checkpoint (default: <out-dir>/mixture.ckpt).
        #[arg(long)]
        mixture: Option<PathBuf>,
    },
    /// Write expected reconstructions and per-instance errors.
    Reconstruct {
        /// Mixture or VAE checkpoint (default: <out-dir>/mixture.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV of instances (default: the configured training data).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Latent samples per instance.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Write per-instance, per-component latent statistics.
    ExportLatents {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Report reconstruction error, probe accuracy and classifier error.
    Eval {
        /// Mixture or classifier checkpoint (default: <out-dir>/moe.ckpt if
        /// present, else <out-dir>/mixture.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Loads the config file, applies flag overrides and validates.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(b) = common.label_budget {
        cfg.label_budget = b;
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(
            std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        );
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    commands::dispatch(&cfg, cli.command)
}
