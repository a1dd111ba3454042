use thiserror::Error;

/// Errors raised by the design calculators, the data generator, the GEE
/// engine and the simulation harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A user-supplied value is outside its admissible range.
    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The ICC triple does not yield a positive definite correlation matrix.
    /// `violated` lists the 1-based eigenvalue indices that are not positive.
    #[error("correlation matrix is not positive definite: {message}")]
    InvalidCorrelation { violated: Vec<usize>, message: String },

    /// A formula was evaluated outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix of order {order} exceeds the dense storage cap {cap}")]
    CapExceeded { order: usize, cap: usize },

    #[error("no sample size up to {cap} clusters reaches the target power")]
    NoSolution { cap: u64 },

    #[error("infeasible allocation: {0}")]
    Allocation(String),

    /// A conditional mean of the binary generator left [0, 1].
    #[error("conditional mean {value} outside [0, 1] in cluster {cluster} at observation {index}")]
    OutOfRange {
        cluster: usize,
        index: usize,
        value: f64,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    /// Too many replications of a scenario failed to converge.
    #[error("scenario aborted: {0}")]
    Aborted(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
