use thiserror::Error;

/// Errors produced by the tracking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A matrix that must be positive definite was not.
    #[error("numerical failure{}: {message}", frame.map(|k| format!(" at frame {k}")).unwrap_or_default())]
    Numerical {
        frame: Option<usize>,
        message: String,
    },

    #[error("training failed: {0}")]
    Training(String),

    /// A file could not be parsed; `context` names the line or field.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for failures that stem from numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Training(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
