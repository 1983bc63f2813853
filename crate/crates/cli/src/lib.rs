//! Experiment runner for the `mkrem` reconstruction library: configuration,
//! artifact formats, stage caching and the command implementations behind
//! the `mkrem` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod workspace;

pub use commands::{demo, run_all, DemoOptions, Experiment};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use workspace::StageStatus;
