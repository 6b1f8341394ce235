use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("outside domain: {0}")]
    Domain(String),
    #[error("breakpoints must be strictly increasing")]
    NonMonotoneBreakpoints,
    #[error("continuity violated at breakpoint {index}: jump {jump:e}")]
    Continuity { index: usize, jump: f64 },
    #[error("degenerate activation moments: sum of pi_i * alpha_i is zero")]
    DegenerateMoments,
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("coefficient tensor needs {entries} entries, cap is {cap}")]
    CapExceeded { entries: u128, cap: u128 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("path enumeration needs {0} paths, limit is 1e6")]
    PathOverflow(u128),
    #[error("no sign change: {0}")]
    NoSignChange(String),
    #[error("idx format: {0}")]
    Idx(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
