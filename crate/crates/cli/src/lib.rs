//! Experiment orchestration for the `gxssl` command.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod run_manifest;
pub mod sweep;
