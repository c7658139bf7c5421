//! Command-line orchestration of the simulate, pretrain, train, infer and
//! calibrate pipeline.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod tables;

use std::fmt;

pub use args::{Cli, Command, Common};

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// NaN or divergence during computation (exit 3).
    Numeric(String),
    /// File system, format or checksum problem (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<symflow::Error> for CliError {
    fn from(e: symflow::Error) -> Self {
        use symflow::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite(_) | E::Divergence(_) => CliError::Numeric(msg),
            E::Io(_) | E::Format(_) => CliError::Io(msg),
            E::Domain(_) | E::Shape(_) | E::Config(_) | E::Json(_) => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> CliResult<()> {
    commands::dispatch(cli)
}
