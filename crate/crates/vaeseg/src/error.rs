use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Misuse of the autodiff graph (non-scalar loss, reused backward, ...).
    #[error("graph error: {0}")]
    Graph(String),
    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset or label content problems.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed RVOL or checkpoint files.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Shape(_)
            | Error::Graph(_)
            | Error::Config(_)
            | Error::Data(_)
            | Error::Format(_) => 1,
            Error::Io(_) => 2,
        }
    }
}
