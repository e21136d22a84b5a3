//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or grids) that must share a shape do not.
    #[error("shape mismatch: {left:?} vs {right:?} in {context}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    /// A shape, axis, or layer hyperparameter is invalid on its own.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Backward was asked to start from a non-scalar tensor.
    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },

    /// A numeric quantity that must be finite is NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A mask has no boundary pixels, so boundary-derived quantities are undefined.
    #[error("mask has no boundary pixels ({0})")]
    EmptyBoundary(String),

    /// Ellipse fitting failed (too few points, collinear input, or non-elliptic conic).
    #[error("ellipse fit failed: {0}")]
    EllipseFit(String),

    /// Dataset loading or parsing problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization / deserialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(left: &[usize], right: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
