//! Experiment driver around the branch-decomposition training library:
//! config parsing, network construction, model files, metrics, and the
//! subcommand implementations. The thin binary in main.rs only parses
//! arguments and maps errors to exit codes.

pub mod builder;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model_file;

pub use error::{CliError, CliResult};
