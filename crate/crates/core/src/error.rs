use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tensor too large: {entries} entries exceeds limit {limit}")]
    TooLarge { entries: u128, limit: u128 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("fusion degenerate: assembled precision is not positive definite (kappa scale {kappa_scale})")]
    FusionDegenerate { kappa_scale: f64 },

    #[error("natural parameter outside family domain: {0}")]
    DomainViolation(String),

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.to_string())
        } else {
            Error::Format(e.to_string())
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Error::Io(e.to_string())
        } else {
            Error::Format(e.to_string())
        }
    }
}
