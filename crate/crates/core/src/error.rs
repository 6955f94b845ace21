use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation input: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contact map has no annotated entries")]
    EmptyContactMap,
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("flattened layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("generation exhausted: {0}")]
    GenerationExhausted(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
