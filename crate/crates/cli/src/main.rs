//! `nestor`: train, evaluate, predict and gradient-check from one TOML
//! config. Exit codes: 0 ok, 2 config, 3 data, 4 compatibility, 5 numeric.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliError, EXIT_CONFIG};

#[derive(Parser, Debug)]
#[command(name = "nestor", version, about = "Nested named entity recognition with a proposer-regressor network")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set model.dim=32 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for --set train.seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes best.ckpt, last.ckpt, metrics.jsonl and config.toml.
    Train,
    /// Score a checkpoint on a labelled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.test, then data.dev.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict entities for a JSONL file (entities optional).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Corrupt the backward pass of this op (suite self-test).
        #[arg(long)]
        fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = nestor_core::parallel::configure_threads().map_err(|e| CliError::config("NESTOR_THREADS", e))?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    log::info!("resolved config:\n{}", cfg.to_toml().trim_end());
    log::info!("{threads} worker threads");
    match &cli.command {
        Command::Train => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            commands::train_cmd(&cfg, &out)
        }
        Command::Eval { checkpoint, data } => commands::eval_cmd(&cfg, checkpoint, data.as_deref(), cli.out.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => commands::predict_cmd(&cfg, checkpoint, input, output.as_deref()),
        Command::Gradcheck { fault } => commands::gradcheck_cmd(fault.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
