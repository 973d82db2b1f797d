use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the inference engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context}: matrix must be square, got {rows}x{cols}")]
    NotSquare {
        context: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("{context}: Cholesky factor has a zero on its diagonal")]
    SingularCholesky { context: &'static str },

    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: String },

    #[error("{context}: entry ({row}, {col}) above the diagonal is nonzero")]
    NotLowerTriangular {
        context: &'static str,
        row: usize,
        col: usize,
    },

    #[error("estimator `{estimator}` needs the Hessian of log p(y, theta), which model `{model}` does not provide")]
    MissingHessian { estimator: String, model: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
