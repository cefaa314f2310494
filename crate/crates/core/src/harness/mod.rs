//! Scenario generation, datasets, evaluation and the command-line pipeline.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod scenarios;

pub use config::{ExperimentConfig, Split, TrainMode};
pub use evaluate::{evaluate, BoxStats, EvaluationReport, Surrogate};
pub use scenarios::generate_scenarios;
