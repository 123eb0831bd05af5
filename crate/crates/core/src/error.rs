use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only n = 2 and n = 3 are discretized")]
    UnsupportedDimension(usize),

    #[error("invalid resolution {resolution}: {reason}")]
    InvalidResolution { resolution: usize, reason: &'static str },

    #[error("field lives on a different grid (expected {expected}, found {found})")]
    GridMismatch { expected: String, found: String },

    #[error("resolution too small: interpolation residual {residual:.3e} exceeds {threshold:.3e} ({context})")]
    UnderResolved { residual: f64, threshold: f64, context: String },

    #[error("invalid body spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("body is not in the smooth strictly convex class: {0}")]
    InvalidBody(String),

    #[error("frame decomposition failed at node {node}: {reason}")]
    FrameDecomposition { node: usize, reason: String },

    #[error("basis degree {degree} needs a grid of degree at least {needed}, grid has {available}")]
    BasisExceedsGrid { degree: usize, needed: usize, available: usize },

    #[error("mass matrix is not positive-definite (basis degree {degree} under-resolved by the grid)")]
    Factorization { degree: usize },

    #[error("flow failed: {0}")]
    Flow(String),
}

impl Error {
    /// True for failures caused by discretization rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::UnderResolved { .. }
                | Error::FrameDecomposition { .. }
                | Error::Factorization { .. }
                | Error::Flow(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
