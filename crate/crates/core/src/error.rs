use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("graph construction failed: {0}")]
    Construction(String),

    #[error("invalid mixing matrix: {0}")]
    InvalidMixing(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("compression contract violated (vector seed {seed}): {detail}")]
    ContractViolation { seed: u64, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("divergence at iteration {iteration} on worker {worker}")]
    Divergence { iteration: u64, worker: usize },

    #[error("insufficient probe points: need at least 2, got {0}")]
    InsufficientProbe(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input rather than by the simulator.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidSize(_)
                | Error::InvalidParameter(_)
                | Error::InvalidPartition(_)
                | Error::Shape(_)
        )
    }
}
