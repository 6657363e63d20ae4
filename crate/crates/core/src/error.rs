use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error in `{field}`: {message}")]
    Checkpoint { field: String, message: String },
    #[error("training fault: {0}")]
    Training(String),
    #[error("schema error: column `{column}`: {message}")]
    Schema { column: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Input(_) => "input",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Training(_) => "training",
            Error::Schema { .. } => "schema",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint { field: field.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
