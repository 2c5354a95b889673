use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] metapred_autodiff::Error),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("code index {index} out of range for a vocabulary of {vocab}")]
    CodeOutOfRange { index: u32, vocab: usize },
    #[error("patient {id} has no visits")]
    EmptySequence { id: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("domain {domain}: need {needed} {class} patients, have {available}")]
    InsufficientPatients {
        domain: String,
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("loss is not finite at inner step {step}")]
    NonFiniteLoss { step: usize },
    #[error("loss {loss} exceeded the divergence threshold at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("split violation: {0}")]
    SplitViolation(String),
    #[error("malformed diagnosis code {0:?}")]
    MalformedCode(String),
    #[error("invalid code pattern {0:?}")]
    InvalidPattern(String),
    #[error("unknown disease {0:?}")]
    UnknownDisease(String),
    #[error("control pool is empty")]
    EmptyControlPool,
    #[error("no control within tolerance for cases {0:?}")]
    UnmatchedCases(Vec<String>),
    #[error("cohort specification is infeasible: {0}")]
    Infeasible(String),
    #[error("empty result group")]
    EmptyGroup,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
