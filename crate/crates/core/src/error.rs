use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate projection: between-class trace {0:e} is below 1e-12")]
    DegenerateProjection(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("density estimation: {0}")]
    Estimation(String),

    #[error("scorer not fitted for pool layer {0}")]
    ScorerMissing(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
