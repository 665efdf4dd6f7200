//! Command-line front end for the glomkit toolkit.
//!
//! Every subcommand reads an optional JSON config, runs one deterministic
//! pipeline stage, and writes its artifacts plus a `manifest.json` (resolved
//! configuration, toolkit version, and output list) into `--out`. Re-running
//! a command with the same arguments reproduces byte-identical outputs.
//!
//! Exit codes: `0` success, `1` usage error (bad flags or an invalid sweep
//! grid), `2` validation/IO error, `3` numerical failure (divergence or a
//! failed gradient check).

use std::fmt;
use std::path::PathBuf;
use std::process;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;

/// Error carrying the process exit code.
///
/// `Usage` maps to exit 1, core validation/IO/format errors to exit 2, and
/// core numerical errors to exit 3.
#[derive(Debug)]
pub enum CliError {
    /// Malformed invocation: bad flag values or an invalid sweep grid.
    Usage(String),
    /// Error bubbled up from the core library.
    Core(glomkit_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(err) => write!(f, "{err}"),
        }
    }
}

impl From<glomkit_core::Error> for CliError {
    fn from(err: glomkit_core::Error) -> Self {
        CliError::Core(err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Core(glomkit_core::Error::from(err))
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(glomkit_core::Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

/// Convenience alias used by all command implementations.
pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "glomkit",
    version,
    about = "Instance-aware segmentation losses, hierarchical lesion classification, \
             and uncertainty-driven dataset cleaning on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Master seed for all random draws in this run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Path to a JSON config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset, scene collection, or single scene.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sweep segmentation losses over a target-ratio x displacement grid.
    LossSweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit a probability map to a scene mask by direct gradient descent.
    FitMask {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the hierarchical two-branch classifier on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Disable the feature-apportionment gate (ablation).
        #[arg(long)]
        no_apportionment: bool,
    },
    /// Remove high-uncertainty samples from a dataset using a trained model.
    Reconstitute {
        #[command(flatten)]
        common: CommonArgs,
        /// Uncertainty threshold; samples with u strictly above it are removed.
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        threshold: f64,
    },
    /// Run the two-stage detection pipeline and report slide-wise metrics.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// IoU threshold for matching predicted boxes to ground truth.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Finite-difference step size.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen { common } => commands::gen(&common),
        Cmd::LossSweep { common } => commands::loss_sweep(&common),
        Cmd::FitMask { common } => commands::fit_mask(&common),
        Cmd::Train {
            common,
            no_apportionment,
        } => commands::train(&common, no_apportionment),
        Cmd::Reconstitute { common, threshold } => commands::reconstitute(&common, threshold),
        Cmd::Eval { common, iou } => commands::eval(&common, iou),
        Cmd::Gradcheck { common, h } => commands::gradcheck(&common, h),
    }
}
