use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed trace line: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: unknown sensor `{sensor}`")]
    UnknownSensor { line: usize, sensor: String },

    #[error("line {line}: unparsable value token `{token}`")]
    BadValue { line: usize, token: String },

    #[error("duplicate sensor id `{0}`")]
    DuplicateSensor(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sensor `{0}` is not part of the schema")]
    SensorNotInSchema(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("empty mask set")]
    EmptyMask,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o: {0}")]
    Write(#[from] std::io::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
