//! Experiment harness: configuration, drivers, run manifests and figures.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod svg;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{HarnessError, HarnessResult};
