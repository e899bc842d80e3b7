use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("degenerate row {row}: all prior entries are zero")]
    DegenerateRow { row: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("refused: {0}")]
    Refusal(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
