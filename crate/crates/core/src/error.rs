use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("model file error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Precondition(_)
            | Error::Format { .. }
            | Error::Evaluation(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
