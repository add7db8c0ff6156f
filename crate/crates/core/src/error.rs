use thiserror::Error;

/// Errors produced by the library and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Non-finite objective inside the inner optimizer.
    #[error("non-finite objective at inner step {step}: {detail}")]
    InnerStep { step: usize, detail: String },

    /// A per-task failure, annotated with where it happened in the outer loop.
    #[error("task {task} (iteration {iteration}): {source}")]
    Task {
        iteration: usize,
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True when the root cause is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::InnerStep { .. } => true,
            Error::Task { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
