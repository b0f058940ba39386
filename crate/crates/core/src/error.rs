use thiserror::Error;

/// Errors produced by the tensor kernels, model construction, conversion and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("weight file: bad {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("benchmark configuration: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
