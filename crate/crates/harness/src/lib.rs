//! Experiment orchestration: configs, training pipelines, generation,
//! evaluation, rank sweeps and correlation with expert rankings.

pub mod augmentation;
pub mod config;
pub mod correlate;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod pipeline;
pub mod sweep;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
