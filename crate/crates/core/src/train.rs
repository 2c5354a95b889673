//! Minibatch training of a sequence model on one domain's training split.
//! Shared by target-only baselines, fine-tuning and transfer learning.

use indexmap::IndexMap;
use log::debug;
use metapred_autodiff::precision::round_in_place;
use metapred_autodiff::{gradient, with_precision, ParamSet, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::{DomainDataset, SplitTag};
use crate::error::{Error, Result};
use crate::learner::{Learner, SequenceLearner};
use crate::model::{fold_norm_stats, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub precision: Precision,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            precision: Precision::Single,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning rate and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pull towards an anchor, `½γ‖Θ − Θ⁰‖²`, applied as an exact proximal
/// step after each gradient step on the data loss.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub anchor: &'a ParamSet,
    pub gamma: f64,
}

impl Prox<'_> {
    /// `½γ‖Θ − Θ⁰‖²` over the given parameter names.
    pub fn penalty<'n>(&self, params: &ParamSet, names: impl IntoIterator<Item = &'n str>) -> Result<f64> {
        let mut sq = 0.0;
        for n in names {
            sq += params.get(n)?.squared_distance(self.anchor.get(n)?)?;
        }
        Ok(0.5 * self.gamma * sq)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: ParamSet,
    /// Mean over the epoch's minibatches of the objective (data loss plus
    /// any proximal penalty), each evaluated before its update.
    pub epoch_objective: Vec<f64>,
}

/// Splits a shuffled index list into minibatches; a trailing singleton is
/// merged into the previous batch so batch statistics stay defined.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

/// Trains the parameters not listed in `frozen` on `indices` of the training
/// split. Frozen tensors are returned bit-identical. When any
/// normalization parameter is frozen, batch norm runs on the stored running
/// statistics and those are left alone.
pub fn fit(
    learner: &SequenceLearner,
    init: ParamSet,
    data: &DomainDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    frozen: &[String],
    prox: Option<Prox<'_>>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    for name in frozen {
        init.get(name)?;
    }
    if let Some(p) = &prox {
        if !(p.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be non-negative (got {})",
                p.gamma
            )));
        }
        init.check_layout(p.anchor)?;
    }
    let batch_all = data.batch(SplitTag::Train, indices, 1)?;
    if batch_all.labels.iter().all(|l| l.is_case()) || !batch_all.labels.iter().any(|l| l.is_case()) {
        return Err(Error::SingleClass);
    }
    let is_frozen = |n: &str| frozen.iter().any(|f| f == n);
    let trainable: Vec<String> = init.names().filter(|n| !is_frozen(n)).map(str::to_string).collect();
    let norm_frozen = frozen.iter().any(|n| n.starts_with("bn."));
    let cap = data.sequence_cap(learner.arch.max_len);

    with_precision(cfg.precision, || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(cfg.lr, cfg.adam);
        let mut theta = init;
        let mut order = indices.to_vec();
        let mut epoch_objective = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let chunks = minibatches(&order, cfg.batch_size);
            for chunk in &chunks {
                let batch = data.batch(SplitTag::Train, chunk, cap)?;
                let vars = theta.variables_where(|n| !is_frozen(n));
                let mode = if norm_frozen {
                    Mode::Eval(&theta.buffers)
                } else {
                    Mode::Train
                };
                let ev = learner.loss(&vars, &batch, mode)?;
                let mut loss = ev.loss.value().item()?;
                if let Some(p) = &prox {
                    loss += p.penalty(&theta, trainable.iter().map(String::as_str))?;
                }
                if !(loss.abs() <= cfg.divergence_threshold) {
                    return Err(Error::Diverged { iteration: epoch, loss });
                }
                total += loss;
                let grads: IndexMap<String, Tensor> = gradient(&ev.loss, &vars, false)?
                    .into_iter()
                    .map(|(k, e)| (k, e.value().clone()))
                    .collect();
                let mut next = match cfg.optimizer {
                    Optimizer::Adam => adam.step(&theta, &grads)?,
                    Optimizer::Sgd => sgd_step(&theta, &grads, cfg.lr)?,
                };
                if let Some(p) = prox.filter(|p| p.gamma > 0.0) {
                    let shrink = cfg.lr * p.gamma;
                    for name in &trainable {
                        let half = next.get(name)?;
                        let v = half.zip_map(p.anchor.get(name)?, |h, a| (h + shrink * a) / (1.0 + shrink))?;
                        next.insert(name.clone(), rounded(v)?);
                    }
                }
                if let (false, Some(stats)) = (norm_frozen, ev.norm) {
                    fold_norm_stats(&mut next, &[stats])?;
                }
                theta = next;
            }
            let mean = total / chunks.len() as f64;
            debug!("epoch {epoch}: objective {mean:.5}");
            epoch_objective.push(mean);
        }
        Ok(FitOutcome {
            params: theta,
            epoch_objective,
        })
    })
}

fn sgd_step(params: &ParamSet, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    for (name, g) in grads {
        let v = params.get(name)?.zip_map(g, |x, gi| x - lr * gi)?;
        out.insert(name.clone(), rounded(v)?);
    }
    Ok(out)
}

fn rounded(t: Tensor) -> Result<Tensor> {
    let mut v = t.to_vec();
    round_in_place(&mut v);
    Ok(Tensor::new(t.shape().to_vec(), v)?)
}
