use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("singular projected system at column {0}")]
    SingularProjection(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("GMRES did not converge: relative error {relative_error:.3e} after {restarts} restarts")]
    NotConverged { relative_error: f64, restarts: usize },
    #[error("Newton iteration did not converge after {0} iterations")]
    NewtonNotConverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
