use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not orthogonal (||Q^T Q - I||_F = {residual:e})")]
    NotOrthogonal { residual: f64 },

    #[error("orthogonal matrix has negative determinant ({det}); not a proper rotation")]
    NegativeDeterminant { det: f64 },

    #[error(
        "weight matrix is full rank with det(W) = {det} < 0; its SVD factors cannot both be \
         proper rotations, embed the network into a higher dimension first"
    )]
    ReflectionNeedsEmbedding { det: f64 },

    #[error("time {time} outside of [{start}, {end})")]
    TimeOutOfRange { time: f64, start: f64, end: f64 },

    #[error("singular jacobian: {0}")]
    Singular(String),

    #[error("integration diverged at t = {time} (step {step})")]
    Diverged { time: f64, step: usize },

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("{0}")]
    Schema(String),

    #[error("{path}: {message}")]
    Io {
        path: String,
        kind: std::io::ErrorKind,
        message: String,
    },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, e: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            kind: e.kind(),
            message: e.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Short dotted category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "input.dimension",
            Error::InvalidParameter(_) => "input.invalid",
            Error::NonFinite(_) => "numeric.non_finite",
            Error::NotOrthogonal { .. } => "numeric.not_orthogonal",
            Error::NegativeDeterminant { .. } => "numeric.negative_determinant",
            Error::ReflectionNeedsEmbedding { .. } => "numeric.reflection",
            Error::TimeOutOfRange { .. } => "input.time_range",
            Error::Singular(_) => "numeric.singular",
            Error::Diverged { .. } => "numeric.diverged",
            Error::Decomposition(_) => "numeric.decomposition",
            Error::Schema(_) => "parse.schema",
            Error::Io { kind, .. } => match kind {
                std::io::ErrorKind::NotFound => "io.not_found",
                std::io::ErrorKind::PermissionDenied => "io.permission_denied",
                _ => "io.error",
            },
        }
    }
}
