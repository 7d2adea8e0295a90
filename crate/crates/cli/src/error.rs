use std::io::ErrorKind;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("config: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error("{0}")]
    Diverged(String),

    #[error("writing {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] setvqa::Error),
}

impl CliError {
    /// Process exit status. 1 is reserved for unclassified failures.
    pub fn exit_code(&self) -> u8 {
        use setvqa::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Config(_) => 6,
            CliError::GradcheckFailed(_) => 7,
            CliError::Diverged(_) => 8,
            CliError::Output { .. } => 1,
            CliError::Core(e) => match e {
                E::Io(io) if io.kind() == ErrorKind::NotFound => 3,
                E::Io(_) => 1,
                E::Schema { .. } | E::Json(_) | E::Csv(_) | E::ShapeMismatch(_) => 4,
                E::VocabMismatch(_) | E::UnknownLabel { .. } => 5,
                E::InvalidConfig(_) | E::OutOfRange(_) | E::EmptyInput(_) => 6,
                E::NonFinite { .. } | E::Diverged { .. } => 8,
                E::Unsupported(_) => 9,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "missing_file",
            4 => "schema",
            5 => "vocabulary",
            6 => "invalid_config",
            7 => "gradcheck_failed",
            8 => "diverged",
            9 => "unsupported",
            _ => "error",
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;
