//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("diffusion step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("ill-conditioned discretization: {0}")]
    IllConditioned(String),

    #[error("padded label entry is not supported by the legacy conditioning mechanism")]
    PadUnsupportedByLegacy,

    #[error("padded label entry requires an embedding table with a padding row")]
    PadRowMissing,

    #[error("label vector has {got} entries, model is configured for {expected}")]
    LabelCount { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
