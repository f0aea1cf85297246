use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A serialized artifact (checkpoint, config, image) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// The saved parameter census does not match the model being loaded.
    #[error("census mismatch: expected {expected} parameters in {expected_tensors} tensors, found {found} in {found_tensors}")]
    Census {
        expected: usize,
        expected_tensors: usize,
        found: usize,
        found_tensors: usize,
    },

    /// Training diverged.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no usable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
