use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("tape was recorded against different parameter values")]
    StaleTape,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("cannot sample a batch from an empty buffer")]
    EmptyBuffer,
    #[error("component {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("problem `{0}` has no analytic Pareto front")]
    UnsupportedProblem(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("budget {budget} is smaller than the {init} initial evaluations")]
    BudgetTooSmall { budget: u64, init: u64 },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
