//! Meta-learning for low-resource risk prediction from diagnosis-code
//! sequences.
//!
//! A sequence model (CNN, LSTM, MLP or logistic regression over code
//! groups) is meta-trained on several source domains and a simulated
//! target: the outer objective is the simulated target's loss after fast
//! adaptation on the sources plus a μ-weighted source loss at the shared
//! initialization. The result is adapted or fine-tuned on a genuine target
//! domain with few labeled patients.

pub mod adam;
pub mod baselines;
pub mod cohort;
pub mod data;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod learner;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
