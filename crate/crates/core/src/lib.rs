//! Learning trainable meta-information ("commentaries") for neural
//! network training: example-weight curricula, blending augmentation
//! grids, attention masks, and auxiliary targets, optimized through a
//! student's own training by exact unrolled hypergradients or implicit
//! differentiation.

pub mod commentary;
pub mod data;
pub mod error;
pub mod hypergrad;
pub mod models;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{CoreError, Result};
