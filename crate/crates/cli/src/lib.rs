//! Library surface of the experiment CLI, exposed for integration tests.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{cmd_gen, cmd_report, cmd_train, cmd_verify, CliError, KNOWN_CHECKS};
pub use config::{ConfigError, ExperimentConfig, LevelSpec, WorldKind};
