//! `vitp`: train, evaluate and analyze ViT-P models.
//!
//! Exit codes: 0 success, 1 invalid configuration or usage, 2 missing or
//! unreadable checkpoint, 3 internal failure (including a failed gradient
//! check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const OUT_DIR_ENV: &str = "VITP_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "vitp",
    version,
    about = "Vision transformers with multi-scale focal attention bias"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus `--key value` overrides shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Output directory (falls back to the config, then $VITP_OUT_DIR, then ./runs).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics, config and checkpoints.
    Train {
        /// Continue from this checkpoint (its embedded config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line to stderr every N steps (0 for none).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Top-1 accuracy of a checkpoint on the held-out or training split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Mean attention distance per layer and head, as CSV.
    Mad {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out images used for the measurement.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Histogram of the stored focal-bias values, as CSV.
    BiasHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, allow_hyphen_values = true)]
        lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Print the window schedule (one `layer l: [...]` line per layer).
    Schedule {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every parameter gradient in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Only coordinates with |analytic grad| above this are compared.
        #[arg(long, default_value_t = 1e-8)]
        threshold: f64,
        /// Pass when the max relative error is below this.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one run per ablation cell under `<out_dir>/<cell>`.
    Ablate {
        /// `modes` (3 MRFA modes x fixed/learnable/learnable+decay),
        /// `suppression` (MRFA-W over six values) or `bias-method`.
        #[arg(long, default_value = "modes")]
        grid: String,
        /// Run cells concurrently; results do not depend on scheduling.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
