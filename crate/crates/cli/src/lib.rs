//! Command-line front end for `typtab`.
//!
//! The binary is a thin wrapper around [`run`]; argument definitions,
//! commands and the readers for every output format live here so that they
//! can be tested without spawning a process.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;
use thiserror::Error;

mod args;
mod commands;
pub mod output;

pub use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}", path = .path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("writing output: {0}")]
    Output(String),

    #[error("thread pool: {0}")]
    Threads(String),

    #[error(transparent)]
    Core(#[from] typtab::Error),
}

impl CliError {
    /// `1` for bad input (arguments, files, parameters), `2` for numerical
    /// or runtime failures.
    pub fn exit_code(&self) -> i32 {
        use typtab::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 1,
            CliError::Output(_) | CliError::Threads(_) => 2,
            CliError::Core(e) => match e {
                E::Parse(_)
                | E::UnknownFamily(_)
                | E::InvalidParameters { .. }
                | E::Io(_)
                | E::Json(_)
                | E::DimensionMismatch(_)
                | E::AsymmetricMargin
                | E::NonSquare(..) => 1,
                _ => 2,
            },
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    commands::dispatch(cli.command)
}
