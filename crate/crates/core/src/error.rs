use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("invalid cell level {level} (max {max})")]
    InvalidLevel { level: usize, max: usize },

    #[error("invalid cell token {0:?}")]
    InvalidToken(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("signature error: {0}")]
    Signature(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
