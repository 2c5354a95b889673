//! The loss interface the meta-learning and training loops are written
//! against.

use metapred_autodiff::nn::NormStats;
use metapred_autodiff::{Expr, ParamExprs, ParamSet, Tensor};

use crate::data::Batch;
use crate::error::Result;
use crate::model::{cross_entropy, forward, init_params, Architecture, Mode};

pub struct Evaluated {
    pub loss: Expr,
    /// Batch-normalization statistics of a training-mode pass.
    pub norm: Option<NormStats>,
}

/// A differentiable per-batch loss over explicit parameters.
pub trait Learner {
    type Batch;

    fn loss(&self, params: &ParamExprs, batch: &Self::Batch, mode: Mode<'_>) -> Result<Evaluated>;
}

/// Cross-entropy of a sequence model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLearner {
    pub arch: Architecture,
}

impl SequenceLearner {
    pub fn new(arch: Architecture) -> Self {
        SequenceLearner { arch }
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        init_params(&self.arch, seed)
    }
}

impl Learner for SequenceLearner {
    type Batch = Batch;

    fn loss(&self, params: &ParamExprs, batch: &Batch, mode: Mode<'_>) -> Result<Evaluated> {
        let out = forward(&self.arch, params, batch, mode)?;
        Ok(Evaluated {
            loss: cross_entropy(&out.probs, &batch.labels)?,
            norm: out.norm,
        })
    }
}

/// One-parameter learner whose "batch" is a curvature `a`, with loss
/// `½·a·θ²`. Its meta-gradients have closed forms.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarQuadratic;

impl ScalarQuadratic {
    pub const PARAM: &'static str = "theta";

    pub fn params(theta: f64) -> ParamSet {
        let mut p = ParamSet::new("scalar-quadratic");
        p.insert(Self::PARAM, Tensor::scalar(theta));
        p
    }
}

impl Learner for ScalarQuadratic {
    type Batch = f64;

    fn loss(&self, params: &ParamExprs, a: &f64, _mode: Mode<'_>) -> Result<Evaluated> {
        let theta = params.get(Self::PARAM)?;
        Ok(Evaluated {
            loss: theta.mul(theta)?.scale(0.5 * a),
            norm: None,
        })
    }
}
