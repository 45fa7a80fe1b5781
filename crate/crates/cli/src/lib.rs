//! Experiment runner behind the `gcr` binary.

pub mod config;
pub mod output;
pub mod plots;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{exit_code, run, Command, Invocation};
