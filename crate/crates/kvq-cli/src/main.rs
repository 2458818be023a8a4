//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvq_core::KvqError;

#[derive(Parser)]
#[command(name = "kvq", about = "Saliency/texture video quality assessment", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic (or supplied) dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Existing dataset directory; generated under --out when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset and write metric reports.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export saliency/texture/per-patch maps for one input clip or image.
    Maps {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clip directory, raw .kvqt video, or .kvqt image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the per-block routing tables as CSV.
        #[arg(long)]
        routing: bool,
    },
    /// Run the built-in verification suites.
    Check {
        /// Negate the analytic gradient of the named op before comparison
        /// (verifies that the harness catches wrong gradients).
        #[arg(long, hide = true)]
        inject_grad_sign_error: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, data, out, seed } => {
            commands::train::run(config.as_deref(), data.as_deref(), &out, seed)
        }
        Command::Eval { config, checkpoint, data, out } => {
            commands::eval::run(config.as_deref(), &checkpoint, &data, &out)
        }
        Command::Maps { config, checkpoint, input, out, routing } => {
            commands::maps::run(config.as_deref(), &checkpoint, &input, &out, routing)
        }
        Command::Check { inject_grad_sign_error } => {
            return commands::check::run(inject_grad_sign_error.as_deref());
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Numerical(_) => ExitCode::from(3),
                CliError::Core(KvqError::Numerical(_)) => ExitCode::from(3),
                CliError::Core(_) => ExitCode::from(2),
            }
        }
    }
}

/// Errors bubbled up by the subcommands.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Core(KvqError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<KvqError> for CliError {
    fn from(e: KvqError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(KvqError::Io(e))
    }
}
