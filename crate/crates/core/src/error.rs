use thiserror::Error;

use crate::protocol::{EnergyLedger, EpisodeTrace};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("step index {step} outside 0..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("expected energy diverges: no fetch can ever be delivered ((1-p)(1-f) = 0)")]
    Divergence,

    #[error("delivery did not complete within {max_rounds} rounds ({delivered} of {requested} delivered)")]
    NonDelivery {
        max_rounds: usize,
        delivered: usize,
        requested: usize,
        trace: Box<EpisodeTrace>,
        ledger: Box<EnergyLedger>,
    },

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingFailure { iteration: usize, reason: String },

    #[error("empty optimization domain")]
    EmptyDomain,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
