use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} is not positive definite at node {node} (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite {
        what: &'static str,
        node: usize,
        min_eig: f64,
    },

    #[error("{what} is not positive semidefinite at node {node} (min eigenvalue {min_eig:.3e})")]
    NotPsd {
        what: &'static str,
        node: usize,
        min_eig: f64,
    },

    #[error("{what} has a non-finite entry at node {node}")]
    NonFinite { what: &'static str, node: usize },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {time} is not a node of the grid")]
    OutOfGrid { time: f64 },

    #[error("closed-loop transition requested without a Riccati path")]
    MissingRiccati,

    #[error("Riccati solution lost positivity at node {node} (min eigenvalue {min_eig:.3e}); reduce the step")]
    LostPositivity { node: usize, min_eig: f64 },

    #[error("steady state undefined for G = 0")]
    DegenerateG,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("drift tilt at node {node} needs a nonsingular signal covariance")]
    UnsupportedTilt { node: usize },

    #[error("unsupported policy class: {0}")]
    UnsupportedClass(String),

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
