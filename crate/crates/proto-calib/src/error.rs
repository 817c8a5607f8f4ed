use crate::data::ClassId;

/// Errors produced by dataset ingestion, calibration, classification, and the
/// evaluation protocols.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A row in an embedding or prediction file could not be parsed.
    /// `line` is 1-based and counts the header row.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The records violate the session layout rules.
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in feature vector")]
    NonFinite,

    #[error("undefined cosine for zero vector")]
    ZeroVector,

    #[error("no samples for class {0}")]
    EmptyClass(ClassId),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("duplicate class id {0}")]
    DuplicateClass(ClassId),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// The first failing element of a batch operation, by input index.
    #[error("batch element {index}: {source}")]
    BatchElement {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Protocol-level failures (missing test records, episode pool shortfall).
    #[error("{0}")]
    Protocol(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
