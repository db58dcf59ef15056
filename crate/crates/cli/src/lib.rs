//! Command-line workflows: simulate, fit, forecast, study, diagnose.

use std::fmt;
use std::process::ExitCode;

use rainmap_core::Error;

pub mod args;
pub mod commands;
pub mod config;

pub use args::Cli;
pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERICAL: u8 = 3;
    pub const DIAGNOSTIC: u8 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: exit::USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: exit::DATA,
            message: message.into(),
        }
    }

    pub fn diagnostic(message: impl Into<String>) -> Self {
        CliError {
            code: exit::DIAGNOSTIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => exit::USAGE,
            Error::Singular { .. } | Error::ShrinkLimit { .. } | Error::Domain(_) => {
                exit::NUMERICAL
            }
            Error::Data { .. }
            | Error::Archive { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::DimensionMismatch { .. } => exit::DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Parse failures exit with the usage code; `--help` and `--version` with 0.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::SUCCESS
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
