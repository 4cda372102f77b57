use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A factorization or solve failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A Monte Carlo estimate has too few effective draws to be trusted.
    #[error("unreliable estimate: {0}")]
    Unreliable(String),

    /// Malformed input data.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// Every start of a fit (or every cell of a grid) failed.
    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Unreliable(_) | Error::FitFailed(_)
        )
    }
}
