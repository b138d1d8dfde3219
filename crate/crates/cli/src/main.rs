//! `gravityflow`: generate synthetic cities, train and evaluate models,
//! export attention maps and check gradients.

mod commands;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<gravityflow::Error> for CliError {
    fn from(e: gravityflow::Error) -> Self {
        use gravityflow::Error as E;
        let code = match e {
            E::Numeric { .. } | E::Io { .. } | E::Contract(_) => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "gravityflow", version = manifest::build_id(), about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a gravity-governed city and write it as a dataset directory.
    Generate(commands::generate::Args),
    /// Train a model on a dataset directory.
    Train(commands::train::Args),
    /// Evaluate a checkpoint and/or the historical-average baseline.
    Eval(commands::eval::Args),
    /// Write one layer's spatial attention matrices as CSV.
    ExportAttention(commands::export::Args),
    /// Finite-difference gradient check of a small model.
    Gradcheck(commands::gradcheck::Args),
}

/// Worker threads from `GRAVITYFLOW_THREADS`, default 1.
pub fn threads() -> Result<usize, CliError> {
    match std::env::var("GRAVITYFLOW_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "GRAVITYFLOW_THREADS must be a positive integer, got `{v}`"
                ))
            }),
    }
}

pub fn ensure_dir(dir: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::ExportAttention(a) => commands::export::run(a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
