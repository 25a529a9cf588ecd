use thiserror::Error;

use crate::adapt::AdaptationTrace;
use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input width {got} does not match network input width {expected}")]
    Width { expected: usize, got: usize },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("snapshot integrity error: {0}")]
    Integrity(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, step {step}: {term} is {value}")]
    Diverged {
        epoch: usize,
        step: usize,
        term: String,
        value: f64,
    },
    #[error("adaptation failed at iteration {iteration}: {reason}")]
    Adaptation {
        iteration: usize,
        reason: String,
        trace: Box<AdaptationTrace>,
    },
    #[error("invalid evidence: {0}")]
    Evidence(String),
    #[error("invalid benchmark spec: {0}")]
    Spec(String),
    #[error("invalid tag set: {0}")]
    Tags(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
