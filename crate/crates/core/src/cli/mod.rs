//! Command-line front end: configuration, artifact formats and the
//! `generate-data | init | run-em | sample | eval | verify-theory` subcommands.
//!
//! Every failure is reported as one JSON line on stderr,
//! `{"error": "<kind>", "message": "..."}`, with a nonzero exit status.

pub mod artifacts;
mod commands;
pub mod config;
pub mod data;
pub mod format;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::{
    cmd_eval, cmd_generate_data, cmd_init, cmd_run_em, cmd_sample, cmd_verify_theory, Context,
};

use crate::channels::ChannelError;
use crate::diffusion::DiffusionError;
use crate::em::EmError;
use crate::eval::EvalError;
use crate::numerics::NumericsError;
use crate::oracle::OracleError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}: config fingerprint mismatch (pass --allow-fingerprint-mismatch to override)")]
    Fingerprint(String),
    #[error("{0} exists: another process owns this run directory")]
    Locked(PathBuf),
    #[error("{failed} of {total} theory checks failed")]
    TheoryFailed { failed: usize, total: usize },
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Config(_) => "config",
            Self::Usage(_) => "usage",
            Self::Format(_) => "format",
            Self::Fingerprint(_) => "fingerprint",
            Self::Locked(_) => "locked",
            Self::TheoryFailed { .. } => "theory-failed",
            Self::Em(_) => "em",
            Self::Channel(_) => "channel",
            Self::Diffusion(_) => "diffusion",
            Self::Numerics(_) => "numerics",
            Self::Eval(_) => "eval",
            Self::Oracle(_) => "oracle",
        }
    }

    /// The single-line JSON error report.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "diffem", version, about = "Diffusion models from corrupted data via EM")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `$DIFFEM_OUTPUT_ROOT/<name>` or `runs/<name>`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Load artifacts whose config fingerprint differs from this config.
    #[arg(long, global = true)]
    pub allow_fingerprint_mismatch: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw clean data and corrupted observations.
    GenerateData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build the initial dataset and train checkpoint 0.
    Init {
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Run EM up to the configured number of iterations.
    RunEm {
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint, conditionally when observations are given.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Sinkhorn divergence and Gaussian Fréchet distance between two sample files.
    Eval { a: PathBuf, b: PathBuf },
    /// Run the exact-oracle verification suite.
    VerifyTheory,
}

/// Parses the config, applies overrides and dispatches.
pub fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let mut cfg = config::RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Context {
        dir: artifacts::RunDir::resolve(cli.output.as_deref(), &cfg.name),
        cfg,
        allow_mismatch: cli.allow_fingerprint_mismatch,
    };
    match cli.command {
        Command::GenerateData { n } => cmd_generate_data(&ctx, n),
        Command::Init { observations } => cmd_init(&ctx, observations.as_deref()),
        Command::RunEm {
            resume,
            observations,
        } => cmd_run_em(&ctx, resume, observations.as_deref()),
        Command::Sample {
            checkpoint,
            observations,
            n,
        } => cmd_sample(&ctx, &checkpoint, observations.as_deref(), n),
        Command::Eval { a, b } => cmd_eval(&ctx, &a, &b),
        Command::VerifyTheory => cmd_verify_theory(&ctx),
    }
}

/// Entry point for the binary: runs and maps errors to the JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_json_line());
            return 2;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            1
        }
    }
}
