use thiserror::Error;

/// Errors raised by the tensor engine and the layers built on top of it.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tensor is not on the active tape")]
    DetachedTensor,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("unrolled training exceeds memory budget: need {needed}, budget {budget}")]
    MemoryBudgetExceeded { needed: usize, budget: usize },
    #[error("class label {label} out of range for {num_classes} classes")]
    ClassOutOfRange { label: usize, num_classes: usize },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("bad IDX magic number: {0:#010x}")]
    BadMagic(u32),
    #[error("truncated IDX file: {0}")]
    TruncatedFile(String),
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
