//! Trainer, evaluation, ablation and throughput harness around the core
//! models, plus the `tempora` command-line binary.

pub mod ablate;
pub mod bench;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod report;
pub mod trainer;

pub use cli::cli_main;
pub use config::TrainConfig;
