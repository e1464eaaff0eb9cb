use thiserror::Error;

/// Errors surfaced by graph loading, tensor ops, training, and evaluation.
///
/// Variants carry enough context (names, indices, shapes) that a caller can
/// report the failure without re-deriving what went wrong.
#[derive(Error, Debug)]
pub enum Error {
    /// File-format or filesystem problem while reading a dataset directory.
    #[error("dataset error in {path}: {reason}")]
    Dataset { path: String, reason: String },

    /// An I/O failure outside of dataset parsing (checkpoints, CSV output).
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed checkpoint: wrong magic, unsupported version, or truncation.
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    /// Sparse-matrix construction rejected the input entries.
    #[error("sparse matrix error: {0}")]
    Sparse(String),

    /// Operands have incompatible shapes for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: String, details: String },

    /// An argument is outside the operation's domain (negative probability,
    /// zero dimension, k out of range, non-positive temperature, ...).
    #[error("invalid argument for {op}: {details}")]
    InvalidArgument { op: String, details: String },

    /// A numeric contract was violated (log of a non-positive value, matrix
    /// not positive semi-definite, zero-degree node during normalization).
    #[error("numeric error in {op}: {details}")]
    Numeric { op: String, details: String },

    /// The training objective became non-finite.
    #[error("objective diverged at epoch {epoch}: {details}")]
    Divergence { epoch: usize, details: String },

    /// Experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used throughout the tensor module.
    pub(crate) fn shape(op: &str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            details: details.into(),
        }
    }

    pub(crate) fn arg(op: &str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.to_string(),
            details: details.into(),
        }
    }

    pub(crate) fn numeric(op: &str, details: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.to_string(),
            details: details.into(),
        }
    }

    pub(crate) fn dataset(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
