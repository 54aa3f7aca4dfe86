//! Command-line front end: configuration, commands and error reporting.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Command, Format, RunConfig};
pub use error::CliError;
