//! Numerical substrate for the cochlear-token pipeline: dense arrays, a
//! reverse-mode tape, AdamW, and warmup/cosine learning-rate schedules.

mod array;
pub mod gradcheck;
pub mod optim;
mod scalar;
pub mod schedule;
pub mod spectral;
pub mod tape;

pub use array::Array;
pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use schedule::ScheduleSpec;
pub use spectral::{FrameSpec, FramedDft, SpectrumMode};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
