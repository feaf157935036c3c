use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or indices that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// Input data that cannot be processed (non-finite entries, wrong length).
    #[error("data error: {0}")]
    Data(String),
    /// Parameters outside the domain of a model.
    #[error("domain error: {0}")]
    Domain(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite:?}): {message}")]
    Training {
        epoch: usize,
        last_finite: Option<usize>,
        message: String,
    },
    /// Invalid configuration, naming the offending field.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
