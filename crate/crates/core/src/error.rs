use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid knot sequence: {0}")]
    InvalidKnots(String),

    #[error("point {t} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("penalized least-squares system is singular: {0}")]
    SingularFit(String),

    #[error("curves do not share a common basis")]
    BasisMismatch,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    NumericalError(String),

    #[error("pooled observation times leave a gap of {gap} (allowed {allowed})")]
    SparseCoverage { gap: f64, allowed: f64 },

    #[error("no subject has two or more observations; covariance is unidentified")]
    CovarianceUnidentified,

    #[error("every subject has a single observation; leave-one-out CV is undefined")]
    CvUndefined,

    #[error("near-peak interval undefined for non-positive peak value {0}")]
    NearPeakUndefined(f64),

    #[error("group is empty")]
    EmptyGroup,

    #[error("contingency table has a zero margin")]
    ZeroMargin,

    #[error("invalid cluster count k = {k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid date: {0}")]
    InvalidDate(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::SingularFit(_) | Error::NumericalError(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
