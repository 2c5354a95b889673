//! Experiment driver: one manifest describes a dataset, the domain roles
//! and every training setting; subcommands write their artifacts under the
//! output directory.

pub mod artifacts;
pub mod commands;
pub mod experiment;
pub mod manifest;

pub use commands::{run, Cli, Command};
pub use manifest::ExperimentManifest;
