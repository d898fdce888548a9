//! Experiment runner: trains backbones, streams adaptation runs and writes
//! result files plus tab-separated tables for plotting.

pub mod commands;
pub mod config;
pub mod failure;
pub mod output;

pub use config::ExperimentConfig;
pub use failure::Failure;
