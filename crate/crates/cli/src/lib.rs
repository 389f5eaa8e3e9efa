//! Command-line workflows over the `mixprec` library: quantize a model, run
//! the bit-width search for one or many QEMs, run the sensitivity ablations,
//! correlate quantization error with agreement, and emit runtime reports.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

pub mod args;
pub mod commands;
pub mod output;
pub mod runtime;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use args::{Cli, Command, CommonArgs, Format, RunConfig};
pub use runtime::{measure_runtime, time_search, RuntimeReport};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag values.
    Usage(String),
    /// Load, validation or I/O failure on the data itself.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mixprec::Error> for CliError {
    fn from(e: mixprec::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
