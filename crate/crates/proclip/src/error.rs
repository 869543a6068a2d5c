//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or batch shapes for an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training aborted because a loss or gradient went non-finite.
    #[error("numerical abort at step {step}: {context}")]
    NumericalAbort { step: u64, context: String },

    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training was requested on an empty corpus.
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    /// A binary file failed to parse; `offset` is the byte position.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// World generation could not satisfy prototype separability.
    #[error("world generation failed: {0}")]
    WorldGeneration(String),

    /// Teacher pretraining did not reach the required retrieval quality.
    #[error("pretraining gate failed: recall@1 {recall:.4} < {required:.4}")]
    PretrainGate { recall: f64, required: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
