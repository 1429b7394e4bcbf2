//! Experiment harness: configuration, metrics, repetitions and output files.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod plot;

pub use config::{Algorithm, ExperimentConfig};
pub use experiment::{run_experiment, run_repetition, Environment, RunRecord};
