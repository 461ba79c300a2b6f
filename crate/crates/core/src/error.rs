use thiserror::Error;

/// Errors raised by the memory, attention and regression routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {0} is outside the unit interval")]
    OutOfDomain(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("density integrates to zero")]
    DegenerateDensity,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("memory is empty")]
    EmptyMemory,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular(_) | Error::DegenerateDensity)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
