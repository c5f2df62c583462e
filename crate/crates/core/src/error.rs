use thiserror::Error;

pub type Result<T> = std::result::Result<T, OttaError>;

#[derive(Debug, Error)]
pub enum OttaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Loss or gradient became non-finite while processing a batch item.
    #[error("numeric failure: non-finite loss at batch item {item}")]
    NumericFailure { item: usize },

    #[error("training failed at epoch {epoch}, batch {batch}: {reason}")]
    TrainingFailure {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("adaptation failed for subject {subject} at event {event}: {reason}")]
    AdaptationFailure {
        subject: String,
        event: usize,
        reason: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("unknown strategy {0}")]
    UnknownStrategy(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
