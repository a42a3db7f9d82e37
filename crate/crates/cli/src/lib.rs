//! Library side of the `fedmr` binary: manifests and the subcommands.

pub mod commands;
pub mod manifest;

pub use commands::{cmd_compare, cmd_run, cmd_verify, Comparison, RunInfo};
pub use manifest::ExperimentManifest;
