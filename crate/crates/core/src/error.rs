use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("quadrature failed to reach tolerance after {subdivisions} subdivisions (error estimate {estimate:e})")]
    Quadrature { subdivisions: usize, estimate: f64 },

    #[error("matrix is not antisymmetric (deviation {0:e})")]
    NotAntisymmetric(f64),

    #[error("direction is not tangent to the rotation group at W (deviation {0:e})")]
    TangentViolation(f64),

    #[error("matrix is too far from the rotation group (||W^T W - I||_F = {0:e})")]
    TooFarFromGroup(f64),

    #[error("ill-conditioned data: {0}")]
    IllConditioned(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
