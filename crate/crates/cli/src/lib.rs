//! Library side of the `jmls` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
