use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("record list is empty")]
    EmptyRecords,

    #[error("evaluation cell list is empty")]
    EmptyCells,

    #[error("too few observed cells: have {have}, need {need}")]
    TooFewObserved { have: usize, need: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("batch {batch} contains no observed entries")]
    EmptyBatch { batch: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("method `{method}` failed at cycle {cycle}, fold {fold}: {source}")]
    MethodFailure {
        method: String,
        cycle: usize,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
