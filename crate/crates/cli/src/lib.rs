//! Staged command-line pipeline: synth → train → attack → evaluate → report.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::Context;
