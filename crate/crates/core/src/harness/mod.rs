//! Synthetic end-to-end experiments: data generation, a small embedding
//! model trained with the margin losses, persistence and reporting.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod model;
pub mod synthetic;
pub mod train;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentResult, ReportRow};
pub use synthetic::{gen_framesets, gen_identities, SyntheticSpec};
pub use train::{train_model, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("loss diverged at iteration {iter}: {loss}")]
    DivergedLoss { iter: u64, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Quality(#[from] crate::quality::QualityError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::InvalidSpec(_)
                | HarnessError::Config(_)
                | HarnessError::Loss(crate::loss::LossError::InvalidConfig(_))
                | HarnessError::Dynamics(crate::dynamics::DynamicsError::InvalidSchedule(_))
                | HarnessError::Dynamics(crate::dynamics::DynamicsError::InvalidRate(_))
        )
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
