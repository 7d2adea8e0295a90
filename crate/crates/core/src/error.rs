use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("schema violation at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("{0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(line: usize, msg: impl Into<String>) -> Self {
        Error::Schema { line, msg: msg.into() }
    }
}
