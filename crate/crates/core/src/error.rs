//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected form) disagree on shape.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structurally valid call with an argument that makes no sense.
    #[error("{op}: {msg}")]
    InvalidArgument { op: String, msg: String },

    /// Raw data length does not match the requested shape.
    #[error("tensor of shape {shape:?} needs {expected} elements, got {actual}")]
    BadTensorLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Differentiation was requested of a non-scalar node.
    #[error("differentiation target must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    /// A graph leaf was evaluated without a value bound to it.
    #[error("leaf '{name}' (node {id}) has no value assigned")]
    MissingLeaf { name: String, id: usize },

    /// Closed-form recovery has no usable hidden unit to divide by.
    #[error(
        "all hidden-unit bias gradients are below {threshold:e}; \
         the observation does not determine the input"
    )]
    DegenerateGradient { threshold: f64 },

    /// A batch operation received zero instances.
    #[error("empty batch")]
    EmptyBatch,

    /// Malformed binary or text file content.
    #[error("{path}: {msg} (at byte {offset})")]
    Format {
        path: String,
        msg: String,
        offset: u64,
    },

    /// Bad key/value configuration text.
    #[error("{path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// An internal contract was violated by the caller.
    #[error("{0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.to_string(),
            msg: msg.into(),
        }
    }
}
