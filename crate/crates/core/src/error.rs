use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite value {value} at {location}")]
    NonFinite { location: String, value: f64 },

    #[error(
        "unstable time step: dt = {dt} must be below h^2/(6 max d) = {bound} (max d = {d_max})"
    )]
    Unstable { dt: f64, bound: f64, d_max: f64 },

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
