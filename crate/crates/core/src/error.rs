use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A numeric argument is outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("budget mismatch: schedule spends {spent} transitions, budget is {budget}")]
    BudgetMismatch { spent: u64, budget: u64 },

    /// `m_T = 0`: no full-length trajectory, the truncated estimator is biased.
    #[error("biased schedule: no trajectory of full length {horizon}")]
    BiasedSchedule { horizon: usize },

    #[error("sample counts must be positive and non-increasing (violated at t = {index})")]
    NonMonotone { index: usize },

    #[error("brute-force size guard: horizon {horizon} (max 6), budget {budget} (max 24)")]
    SizeGuard { horizon: usize, budget: u64 },

    #[error("schedule was designed for gamma = {schedule}, estimate requested with gamma = {requested}")]
    GammaMismatch { schedule: f64, requested: f64 },

    #[error("behavior probability {prob:e} below floor at step {step}: target not absolutely continuous")]
    AbsoluteContinuity { step: usize, prob: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no trajectory of length >= {0} in batch")]
    NoTrajectory(usize),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("batch does not conform to schedule: {0}")]
    NonConforming(String),

    #[error("step {t} is past the horizon {horizon}")]
    HorizonExceeded { t: usize, horizon: usize },

    #[error("invalid action {action} (environment has {n_actions})")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("operation requires the {expected} environment, got {got}")]
    WrongVariant { expected: &'static str, got: String },

    #[error("parse error: {0}")]
    Parse(String),

    /// A numerical invariant the math guarantees has been violated.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
