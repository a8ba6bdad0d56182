use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("state vector must have at least one component")]
    Empty,
    #[error("component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("field expects dimension {expected}, got state of dimension {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("field produced a non-finite velocity at t = {t}")]
    NonFiniteOutput { t: f64 },
    #[error("invalid field definition: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("a time grid needs at least one step")]
    TooFewPoints,
    #[error("time point {index} ({value}) lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("time points are not strictly monotone at index {index}")]
    NotMonotone { index: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlpError {
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("layer sizes must be positive")]
    ZeroWidth,
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("input has dimension {got}, network expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("parameter {0} is not finite")]
    NonFiniteParameter(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixtureError {
    #[error("a mixture needs at least one component")]
    Empty,
    #[error("component weights must be positive and sum to 1 (sum = {0})")]
    Weights(f64),
    #[error("covariance of component {0} is not symmetric positive definite")]
    Covariance(usize),
    #[error("non-finite mean in component {0}")]
    Mean(usize),
}
