//! Checkpoint files, run configuration, reports and the command-line pipeline
//! around `emerge_core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{CliError, ErrorClass};
