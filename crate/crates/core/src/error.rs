use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("batch of size {0} is degenerate for batch normalization in train mode")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNormRow(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("enqueued key row {row} is not unit-norm (|norm - 1| = {deviation:.3e})")]
    NonUnitKey { row: usize, deviation: f64 },
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("empty labelled set")]
    EmptyLabelledSet,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("selection budget {budget} exceeds pool size {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("brute-force instance too large: C({n}, {b}) exceeds {limit}")]
    InstanceTooLarge { n: usize, b: usize, limit: u64 },
    #[error("invalid probability distribution for candidate {id}: sums to {sum}")]
    InvalidDistribution { id: usize, sum: f64 },
    #[error("label access violation: id {0} is not in the labelled set")]
    LabelAccessViolation(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("idx format error: {0}")]
    IdxFormat(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
