//! `permgen`: train, generate, evaluate and inspect sentence-permuted
//! paragraph generators.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data or I/O
//! error, 3 numeric failure.

mod config;
mod evaluate;
mod generate;
mod inspect;
mod toy;
mod train;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use permgen::Error;

#[derive(Parser, Debug)]
#[command(
    name = "permgen",
    version,
    about = "Sentence-permuted paragraph generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model with one sampled sentence order per example and step.
    Train(train::TrainArgs),
    /// Decode K ranked candidates per input.
    Generate(generate::GenerateArgs),
    /// Accuracy and diversity metrics for a generation file.
    Evaluate(evaluate::EvaluateArgs),
    /// Dump a checkpoint or a decoder sequence.
    Inspect(inspect::InspectArgs),
    /// Write the bundled synthetic corpus.
    ToyCorpus(toy::ToyArgs),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let lib = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match lib {
        Some(Error::Config(_) | Error::Usage(_)) => 1,
        Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PERMGEN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Generate(a) => generate::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Inspect(a) => inspect::run(a),
        Command::ToyCorpus(a) => toy::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
