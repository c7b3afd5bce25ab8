use thiserror::Error;

/// Errors produced by this crate.
///
/// `ShapeMismatch`, `InvalidArgument` and `Format` are validation failures;
/// `NonFinite` and `Divergence` signal numerical trouble at runtime. The CLI
/// maps the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch(_)
                | Error::InvalidArgument(_)
                | Error::Format(_)
                | Error::Io(_)
        )
    }
}
