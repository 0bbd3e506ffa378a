use thiserror::Error;

#[derive(Debug, Error)]
pub enum DssError {
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    /// The parent run cannot take a what-if yet.
    #[error("invalid override: parent run {0} is not done")]
    ParentNotDone(String),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("missing trace for run {0}")]
    MissingTrace(String),
    #[error("unknown report kind {0}")]
    UnknownKind(String),
    #[error(transparent)]
    Core(#[from] pitplan::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type DssResult<T> = std::result::Result<T, DssError>;
