//! Experiment harness for dgfnet: configuration, training runs, ablation,
//! gate statistics, separation and dataset export.

pub mod commands;
pub mod config;
pub mod render;
pub mod runlog;

pub use commands::exit_code;
pub use config::ExperimentConfig;
