use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ubn_core::gradcheck::DEFAULT_TOL;

/// Unified batch normalization experiments.
#[derive(Debug, Parser)]
#[command(name = "ubn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient check of one normalization layer kind.
    Gradcheck {
        /// bn, ubn, in, ln or gn.
        kind: String,
        /// Input shape as B,C,H,W.
        #[arg(long, default_value = "4,3,5,5")]
        shape: String,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train two configs that differ only in their norm table and summarize.
    Compare {
        /// Given twice: the two configs to compare.
        #[arg(long, required = true, action = clap::ArgAction::Append)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Condensation scores at every norm layer input for the probe batch.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model weights to load; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                ubn_cli::EXIT_USAGE as u8
            } else {
                ubn_cli::EXIT_OK as u8
            });
        }
    };
    let code = match cli.command {
        Command::Train { config, out, seed } => ubn_cli::cmd_train(&config, &out, seed),
        Command::Gradcheck {
            kind,
            shape,
            tol,
            seed,
        } => ubn_cli::cmd_gradcheck(&kind, &shape, tol, seed),
        Command::Compare { config, out, seed } => match config.as_slice() {
            [a, b] => ubn_cli::cmd_compare(a, b, &out, seed),
            _ => {
                eprintln!(
                    "error: compare needs --config exactly twice, got {}",
                    config.len()
                );
                ubn_cli::EXIT_USAGE
            }
        },
        Command::Probe {
            config,
            out,
            checkpoint,
            seed,
        } => ubn_cli::cmd_probe(&config, &out, checkpoint.as_deref(), seed),
    };
    ExitCode::from(code as u8)
}
