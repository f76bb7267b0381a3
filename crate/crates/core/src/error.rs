use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("kernel is singular at t = {0}; need t > 0")]
    SingularKernel(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("non-finite parameter at index {index}")]
    NonFiniteParameter { index: usize },
    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid scalarization: {0}")]
    InvalidScalarization(String),
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
    #[error("sampler state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("truncation retries exhausted after {attempts} attempts at condition {condition:?}")]
    RetriesExhausted { attempts: usize, condition: alloc::vec::Vec<f64> },
    #[error("training diverged at step {step} (loss {loss}); objective trace {trace:?}")]
    Diverged { step: usize, loss: f64, trace: alloc::vec::Vec<f64> },
    #[error("invalid optimizer config: {0}")]
    InvalidOptimizer(String),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("unsupported dimension {0} for grid evaluation (max 2)")]
    UnsupportedDimension(usize),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} failed{}: {source}", task.map(|k| alloc::format!(" for task {k}")).unwrap_or_default())]
    Stage { stage: &'static str, task: Option<usize>, source: alloc::boxed::Box<Error> },
}
