//! Shared error type for the whole pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing sample: {0}")]
    MissingSample(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("symbol out of range: {0}")]
    SymbolOutOfRange(String),
    #[error("degenerate sequence: {0}")]
    DegenerateSequence(String),
    #[error("sample too short: {0}")]
    SampleTooShort(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("ragged input: {0}")]
    RaggedInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("label out of range: {0}")]
    LabelOutOfRange(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("empty grid")]
    EmptyGrid,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("payload too large: {0}")]
    PayloadTooLarge(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse classification used by the CLI to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            MissingSample(_) | MalformedManifest(_) | EmptyCorpus(_) | SampleTooShort(_)
            | EmptyInput(_) | RaggedInput(_) | LabelOutOfRange(_) | LengthMismatch(_)
            | EmptyMatrix | Io(_) => ErrorCategory::Data,
            DegenerateSequence(_) | Numeric(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}
