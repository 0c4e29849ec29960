//! Experiment harness around `wmra-core`: TOML configuration, the named
//! experiments and CSV output.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{Config, ConfigError};
pub use experiments::{run_experiment, Experiment, Overrides, Report};
