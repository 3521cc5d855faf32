//! Library side of the `tcvae` command-line tool.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
