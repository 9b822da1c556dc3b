use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfmError>;

#[derive(Debug, Error)]
pub enum DfmError {
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("state space too large to enumerate: {states} states (limit {limit})")]
    Capacity { states: u128, limit: u128 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("not available: {0}")]
    NotAvailable(String),
    #[error("invalid denoiser output: {0}")]
    InvalidDenoiser(String),
    #[error("state is unreachable under the marginal at t={t}")]
    UnreachableState { t: f64 },
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("sample still contains MASK tokens and final fill is disabled")]
    IncompleteSample,
    #[error("mode error: {0}")]
    Mode(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
