//! Experiment harness for commentary meta-learning: configuration,
//! meta-training and evaluation drivers, artifact and metrics
//! persistence, export, and analysis.

pub mod analyze;
pub mod artifact;
pub mod config;
pub mod error;
pub mod export;
pub mod metrics;
pub mod runner;

pub use error::{HarnessError, Result};
