use alloc::string::String;

/// Errors raised by the core library.
///
/// Every variant carries enough context to be rendered as a single
/// diagnostic line by the CLI.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Shape(_) => "shape",
            Error::Validation(_) => "validation",
            Error::NonFinite { .. } => "training",
        }
    }
}
