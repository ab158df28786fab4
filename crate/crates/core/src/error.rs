//! Error types shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// Contract or validation failure (bad shapes, bad config, staging).
    Validation,
    /// IO, file-format or integrity failure.
    IoFormat,
}

/// Errors emitted by the tensor engine, trainer and file formats.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Two tensor shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor had the wrong shape for an operation.
    DimError { op: &'static str, detail: String },
    /// A value-level precondition was violated.
    Contract(String),
    /// A staged training run is missing its prerequisite checkpoint.
    StagedPipeline { needed: String, found: String },
    /// A config file key is unknown or has the wrong type.
    Config { key: String, detail: String },
    /// Underlying IO failure.
    Io(String),
    /// A file did not match its declared format.
    Format(String),
    /// A payload was shorter than its header promised.
    Truncated { expected: usize, actual: usize },
    /// A checksummed payload failed verification.
    Integrity(String),
    /// A serialized artifact carries a version this build cannot read.
    UnsupportedVersion { found: u32, supported: u32 },
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::ShapeMismatch { .. }
            | CoreError::DimError { .. }
            | CoreError::Contract(_)
            | CoreError::StagedPipeline { .. }
            | CoreError::Config { .. } => ErrorClass::Validation,
            CoreError::Io(_)
            | CoreError::Format(_)
            | CoreError::Truncated { .. }
            | CoreError::Integrity(_)
            | CoreError::UnsupportedVersion { .. } => ErrorClass::IoFormat,
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            CoreError::DimError { op, detail } => write!(f, "{op}: {detail}"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::StagedPipeline { needed, found } => write!(
                f,
                "staged pipeline: stage requires a {needed} checkpoint, found {found}"
            ),
            CoreError::Config { key, detail } => write!(f, "config key `{key}`: {detail}"),
            CoreError::Io(msg) => write!(f, "io error: {msg}"),
            CoreError::Format(msg) => write!(f, "format error: {msg}"),
            CoreError::Truncated { expected, actual } => write!(
                f,
                "truncated payload: expected {expected} bytes, got {actual}"
            ),
            CoreError::Integrity(msg) => write!(f, "integrity error: {msg}"),
            CoreError::UnsupportedVersion { found, supported } => write!(
                f,
                "unsupported format version {found} (this build reads version {supported})"
            ),
        }
    }
}

impl std::error::Error for CoreError {}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}
