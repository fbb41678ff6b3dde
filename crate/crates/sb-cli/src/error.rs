//! Command-line failure categories and their process exit codes.

use std::fmt;

/// Everything a subcommand can fail with, sorted by whose fault it is:
/// config errors exit 2, data errors 3, model-file errors 4, and a
/// verification suite that found a real property violation exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Model(String),
    Verification(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::Model(msg) => write!(f, "model error: {msg}"),
            CliError::Verification(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}
