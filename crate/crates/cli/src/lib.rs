//! Experiment orchestration: configuration, training of every variant over
//! independent runs, evaluation and report export.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{parse_config, ExperimentConfig, Task, VariantName};
pub use error::{ExperimentError, Result};
pub use experiment::run_experiment;
pub use report::ExperimentReport;
