//! Experiment orchestration for correlated multimodal VAEs: synthetic data
//! sweeps, training, evaluation and trend checks over the resulting metrics.

pub mod compare;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use pipeline::Lab;
