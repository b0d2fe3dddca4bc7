//! Error type for the experiment harness.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("unsupported artifact format version: {0:?}")]
    FormatVersion(String),
    #[error("artifact is incompatible with this config: {0}")]
    ArtifactIncompatible(String),
    #[error("metrics log is empty")]
    EmptyLog,
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("analysis is not defined for the {0} family")]
    UnsupportedFamily(&'static str),
    #[error(transparent)]
    Core(#[from] commentary_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
