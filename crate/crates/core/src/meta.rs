//! Meta-training: inner fast adaptation on the source losses, the
//! simulated-target loss at the adapted parameters plus a μ-weighted source
//! loss at the original parameters, and Adam on the averaged meta-gradient.

use std::io::Write;

use indexmap::IndexMap;
use log::{debug, info};
use metapred_autodiff::nn::NormStats;
use metapred_autodiff::{gradient, with_precision, Expr, ParamExprs, ParamSet, Precision, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::DomainDataset;
use crate::episodes::{Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::eval::{meta_test, MetaTestConfig};
use crate::learner::{Learner, SequenceLearner};
use crate::model::{fold_norm_stats, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Differentiate through the inner updates.
    Second,
    /// Treat the inner updates as constants (first-order approximation).
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (fast adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    /// Weight of the source loss in the outer objective.
    pub mu: f64,
    /// Inner steps.
    pub k: usize,
    pub episode_batch: usize,
    pub n_per_domain: usize,
    pub order: Order,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate on the simulated target's test split every this many
    /// iterations (0 disables).
    pub eval_every: usize,
    pub precision: Precision,
    pub divergence_threshold: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            beta: 0.001,
            mu: 0.5,
            k: 3,
            episode_batch: 32,
            n_per_domain: 8,
            order: Order::Second,
            iterations: 500,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
            precision: Precision::Single,
            divergence_threshold: 1e6,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad(format!(
                "alpha and beta must be positive (got {}, {})",
                self.alpha, self.beta
            ));
        }
        if !(self.mu >= 0.0) {
            return bad(format!("mu must be non-negative (got {})", self.mu));
        }
        if self.k == 0 || self.episode_batch == 0 || self.n_per_domain == 0 {
            return bad("k, episode batch and patients per domain must be positive".into());
        }
        Ok(())
    }
}

/// Result of the inner loop.
pub struct Adapted {
    /// Θ′ after `k` steps.
    pub params: ParamExprs,
    /// Σᵢ L_Sⁱ at the original parameters (the first inner step's loss).
    pub source_loss: Expr,
    /// Batch statistics of the first inner step, one per source batch.
    pub norm: Vec<NormStats>,
}

fn source_sum<L: Learner>(learner: &L, params: &ParamExprs, sources: &[L::Batch]) -> Result<(Expr, Vec<NormStats>)> {
    let mut total: Option<Expr> = None;
    let mut norm = Vec::new();
    for b in sources {
        let ev = learner.loss(params, b, Mode::Train)?;
        norm.extend(ev.norm);
        total = Some(match total {
            Some(t) => t.add(&ev.loss)?,
            None => ev.loss,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidConfig("an episode needs at least one source batch".into()))?;
    Ok((total, norm))
}

/// Repeats `Θ ← Θ − α ∇_Θ Σᵢ L_Sⁱ(Θ)` `k` times on fixed source batches.
/// With `create_graph` the result stays differentiable with respect to the
/// original `theta`.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    theta: &ParamExprs,
    sources: &[L::Batch],
    alpha: f64,
    k: usize,
    create_graph: bool,
) -> Result<Adapted> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut current = theta.clone();
    let mut first = None;
    for step in 0..k {
        let (loss, norm) = source_sum(learner, &current, sources)?;
        if !loss.value().item()?.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let g = gradient(&loss, &current, create_graph)?;
        current = current.descend(&g, alpha)?;
        if first.is_none() {
            first = Some((loss, norm));
        }
    }
    let (source_loss, norm) = first.expect("k >= 1");
    Ok(Adapted {
        params: current,
        source_loss,
        norm,
    })
}

fn check_layout(a: &ParamExprs, b: &ParamExprs) -> Result<()> {
    let same = a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((na, ea), (nb, eb))| na == nb && ea.shape() == eb.shape());
    if same {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "parameter layouts differ ({} vs {})",
            a.arch, b.arch
        )))
    }
}

/// `L_Tˢ(Θ′) + μ Σᵢ L_Sⁱ(Θ)`.
pub fn meta_objective<L: Learner>(
    learner: &L,
    theta: &ParamExprs,
    theta_prime: &ParamExprs,
    episode: &Episode<L::Batch>,
    mu: f64,
) -> Result<Expr> {
    check_layout(theta, theta_prime)?;
    let (sources, _) = source_sum(learner, theta, &episode.sources)?;
    let target = learner.loss(theta_prime, &episode.target, Mode::Train)?.loss;
    Ok(target.add(&sources.scale(mu))?)
}

/// Meta-gradient of one episode plus the loss values behind it.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub gradient: IndexMap<String, Tensor>,
    pub source_loss: f64,
    pub target_loss: f64,
    pub objective: f64,
    pub norm: Vec<NormStats>,
}

/// ∇_Θ [L_Tˢ(Θ′) + μ Σᵢ L_Sⁱ(Θ)] for one episode.
pub fn meta_gradient<L: Learner>(
    learner: &L,
    theta: &ParamSet,
    episode: &Episode<L::Batch>,
    alpha: f64,
    mu: f64,
    k: usize,
    order: Order,
) -> Result<MetaGradient> {
    let vars = theta.variables();
    let adapted = inner_adapt(learner, &vars, &episode.sources, alpha, k, order == Order::Second)?;
    let target = learner.loss(&adapted.params, &episode.target, Mode::Train)?.loss;
    let objective = target.add(&adapted.source_loss.scale(mu))?;
    let g = gradient(&objective, &vars, false)?;
    Ok(MetaGradient {
        gradient: g.into_iter().map(|(k, e)| (k, e.value().clone())).collect(),
        source_loss: adapted.source_loss.value().item()?,
        target_loss: target.value().item()?,
        objective: objective.value().item()?,
        norm: adapted.norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub source_loss: f64,
    pub target_loss: f64,
    pub combined: f64,
}

/// Averages the meta-gradient over `episodes` (in order) and applies one
/// Adam step with rate `config.beta`. Batch statistics of the source passes
/// are folded into the running averages.
pub fn meta_train_step<L: Learner>(
    learner: &L,
    theta: &ParamSet,
    episodes: &[Episode<L::Batch>],
    config: &MetaConfig,
    adam: &mut Adam,
) -> Result<(ParamSet, StepRecord)> {
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("empty episode batch".into()));
    }
    let mut sum: Option<IndexMap<String, Tensor>> = None;
    let mut record = StepRecord {
        source_loss: 0.0,
        target_loss: 0.0,
        combined: 0.0,
    };
    let mut norm = Vec::new();
    for ep in episodes {
        let mg = meta_gradient(learner, theta, ep, config.alpha, config.mu, config.k, config.order)?;
        record.source_loss += mg.source_loss;
        record.target_loss += mg.target_loss;
        record.combined += mg.objective;
        norm.extend(mg.norm);
        sum = Some(match sum {
            None => mg.gradient,
            Some(mut acc) => {
                for (name, g) in mg.gradient {
                    let a = acc.get_mut(&name).expect("same parameter names per episode");
                    *a = a.zip_map(&g, |x, y| x + y)?;
                }
                acc
            }
        });
    }
    let n = episodes.len() as f64;
    let mean: IndexMap<String, Tensor> = sum
        .expect("non-empty")
        .into_iter()
        .map(|(k, g)| (k, g.map(|v| v / n)))
        .collect();
    record.source_loss /= n;
    record.target_loss /= n;
    record.combined /= n;
    adam.lr = config.beta;
    let mut next = adam.step(theta, &mean)?;
    if !norm.is_empty() {
        fold_norm_stats(&mut next, &norm)?;
    }
    Ok((next, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub source_loss: f64,
    pub target_loss: f64,
    pub combined: f64,
    pub eval_auroc: Option<f64>,
    pub eval_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Mean combined loss over a window of iterations.
    pub fn mean_combined(&self, range: std::ops::Range<usize>) -> f64 {
        let window = &self.records[range];
        window.iter().map(|r| r.combined).sum::<f64>() / window.len().max(1) as f64
    }

    /// Variance of the combined loss over the last `window` iterations,
    /// relative to the first iteration's loss. `None` for shorter runs.
    pub fn plateau_ratio(&self, window: usize) -> Option<f64> {
        if window == 0 || self.records.len() < window {
            return None;
        }
        let n = self.records.len();
        let mean = self.mean_combined(n - window..n);
        let var = self.records[n - window..]
            .iter()
            .map(|r| (r.combined - mean).powi(2))
            .sum::<f64>()
            / window as f64;
        Some(var / self.records[0].combined)
    }

    /// Most recent evaluation on the simulated target.
    pub fn last_eval(&self) -> Option<(f64, f64)> {
        self.records
            .iter()
            .rev()
            .find_map(|r| Some((r.eval_auroc?, r.eval_f1?)))
    }
}

/// Independent seeds for the parts of one run.
pub(crate) struct RunSeeds {
    pub init: u64,
    pub sampler: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RunSeeds {
            init: rng.next_u64(),
            sampler: rng.next_u64(),
            eval: rng.next_u64(),
        }
    }
}

/// Meta-trains a freshly initialized sequence model.
///
/// Episodes are drawn from the training splits of `sources` and the
/// simulated target; when `config.eval_every` is set, the simulated
/// target's test split is scored after adaptation on source batches.
pub fn meta_train(
    learner: &SequenceLearner,
    sources: &[&DomainDataset],
    simulated_target: &DomainDataset,
    config: &MetaConfig,
) -> Result<(ParamSet, TrainHistory)> {
    let seeds = RunSeeds::new(config.seed);
    let init = learner.init(seeds.init)?;
    meta_train_from(learner, init, sources, simulated_target, config)
}

/// [`meta_train`] from a given initialization.
pub fn meta_train_from(
    learner: &SequenceLearner,
    init: ParamSet,
    sources: &[&DomainDataset],
    simulated_target: &DomainDataset,
    config: &MetaConfig,
) -> Result<(ParamSet, TrainHistory)> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::InvalidConfig(
            "meta-training needs at least one source domain".into(),
        ));
    }
    let seeds = RunSeeds::new(config.seed);
    with_precision(config.precision, || {
        let mut sampler = EpisodeSampler::new(
            sources.to_vec(),
            simulated_target,
            config.n_per_domain,
            learner.arch.max_len,
            seeds.sampler,
        )?;
        let mut adam = Adam::new(config.beta, config.adam);
        let mut theta = init;
        let mut history = TrainHistory::default();
        let eval_cfg = MetaTestConfig {
            alpha: config.alpha,
            k: config.k,
            n_per_domain: config.n_per_domain,
            episodes: 1,
            seed: seeds.eval,
        };
        for iteration in 0..config.iterations {
            let episodes = sampler.sample_batch(config.episode_batch)?;
            let (next, rec) = meta_train_step(learner, &theta, &episodes, config, &mut adam)?;
            for loss in [rec.source_loss, rec.target_loss, rec.combined] {
                if !(loss.abs() <= config.divergence_threshold) {
                    return Err(Error::Diverged { iteration, loss });
                }
            }
            theta = next;
            let due = config.eval_every > 0
                && ((iteration + 1) % config.eval_every == 0 || iteration + 1 == config.iterations);
            let (eval_auroc, eval_f1) = if due {
                let r = meta_test(learner, &theta, sources, simulated_target, &eval_cfg)?;
                (Some(r.auroc), Some(r.f1))
            } else {
                (None, None)
            };
            debug!(
                "iteration {iteration}: source {:.4} target {:.4} combined {:.4}",
                rec.source_loss, rec.target_loss, rec.combined
            );
            history.records.push(IterationRecord {
                iteration,
                source_loss: rec.source_loss,
                target_loss: rec.target_loss,
                combined: rec.combined,
                eval_auroc,
                eval_f1,
            });
        }
        if let Some(last) = history.records.last() {
            info!("meta-training finished: combined loss {:.4}", last.combined);
        }
        Ok((theta, history))
    })
}
