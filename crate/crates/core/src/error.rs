use thiserror::Error;

/// Reasons an instance is rejected at construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("precedence graph contains a cycle through block {0}")]
    Cycle(usize),
    #[error("reference to unknown block id {0}")]
    DanglingId(usize),
    #[error("duplicate block id {0}")]
    DuplicateId(usize),
    #[error("block {0} has non-positive or non-finite mass")]
    NonPositiveMass(usize),
    #[error("block {0} has a negative or non-finite grade")]
    NegativeGrade(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid instance: {0}")]
    Validation(#[from] ValidationError),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate field: values have zero variance")]
    DegenerateField,
    #[error("invalid lag bins: {0}")]
    InvalidBins(String),
    #[error("lp failure: {0}")]
    Lp(#[from] crate::lp::LpError),
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        trace: Box<crate::scenario::vae::TrainingTrace>,
    },
    #[error("conditional generation did not converge: {satisfied} of {requested} scenarios honour the observations")]
    NonConvergence {
        satisfied: usize,
        requested: usize,
        best: Box<crate::scenario::ScenarioSet>,
    },
    #[error("schedule violates constraints (violation {0})")]
    InfeasibleSchedule(f64),
    #[error("no feasible schedule found")]
    NoFeasibleFound,
    #[error("instance too large for exact search: {0} block-periods exceed cap {1}")]
    TooLarge(usize, usize),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
