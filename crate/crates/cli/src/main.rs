//! `fagg` command line: generate synthetic datasets, train aggregation
//! models, predict, evaluate GAP, and fuse prediction files.
//!
//! Exit codes: 0 success, 2 usage/argument errors, 3 data or file-format
//! errors, 4 numeric errors (including training divergence).

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fagg::Error;

#[derive(Parser)]
#[command(name = "fagg", version, about = "Frame-feature aggregation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (JSONL).
    Gen(commands::GenArgs),
    /// Train a model from a JSON run config; writes checkpoints + manifest.
    Train(commands::TrainArgs),
    /// Predict top-k labels for every video in a dataset.
    Predict(commands::PredictArgs),
    /// Evaluate a prediction CSV against dataset ground truth (GAP@k).
    Eval(commands::EvalArgs),
    /// Fuse prediction CSVs according to a fusion plan.
    Fuse(commands::FuseArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => commands::run_gen(args),
        Command::Train(args) => commands::run_train(args),
        Command::Predict(args) => commands::run_predict(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Fuse(args) => commands::run_fuse(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Data(_)
        | Error::Format { .. }
        | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
    }
}
