use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum AcrError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AcrError {
    /// True for failures caused by non-finite values or failed gradient checks.
    pub fn is_numerical(&self) -> bool {
        matches!(self, AcrError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, AcrError>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::AcrError::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
