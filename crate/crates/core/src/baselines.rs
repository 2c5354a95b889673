//! Comparison methods: target-only training, nearest neighbours on code
//! counts, transfer with a pull towards source-pretrained weights, and
//! multitask training with a shared encoder.

use indexmap::IndexMap;
use log::info;
use metapred_autodiff::{gradient, with_precision, Expr, ParamExprs, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::data::{DomainDataset, Label, PatientRecord, SplitTag};
use crate::episodes::sample_balanced;
use crate::error::{Error, Result};
use crate::eval::{evaluate, subsample};
use crate::learner::{Learner, SequenceLearner};
use crate::meta::RunSeeds;
use crate::model::{fold_norm_stats, init_params, Mode};
use crate::train::{fit, FitOutcome, Prox, TrainConfig};

/// Target-only training from a seeded initialization on the whole training
/// split.
pub fn train_supervised(learner: &SequenceLearner, data: &DomainDataset, cfg: &TrainConfig) -> Result<ParamSet> {
    let init = learner.init(RunSeeds::new(cfg.seed).init)?;
    train_supervised_from(learner, init, data, cfg)
}

/// [`train_supervised`] from a given initialization.
pub fn train_supervised_from(
    learner: &SequenceLearner,
    init: ParamSet,
    data: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    Ok(fit(learner, init, data, &data.train, cfg, &[], None)?.params)
}

/// Majority vote over the `k` nearest training patients in Euclidean
/// distance between code-count vectors.
#[derive(Debug, Clone)]
pub struct Knn {
    pub k: usize,
    vocab: usize,
    points: Vec<(Vec<f64>, Label)>,
}

impl Knn {
    pub const DEFAULT_K: usize = 5;

    pub fn fit(data: &DomainDataset, vocab: usize, k: usize) -> Result<Knn> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        let points: Vec<_> = data
            .train
            .iter()
            .map(|&i| (data.patients[i].code_counts(vocab), data.patients[i].label))
            .collect();
        let cases = points.iter().filter(|(_, l)| l.is_case()).count();
        if cases == 0 || cases == points.len() {
            return Err(Error::SingleClass);
        }
        Ok(Knn { k, vocab, points })
    }

    /// Fraction of cases among the neighbours; ties in distance go to the
    /// earlier training patient.
    pub fn predict(&self, patient: &PatientRecord) -> f64 {
        let x = patient.code_counts(self.vocab);
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let k = self.k.min(dist.len());
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let cases = dist[..k].iter().filter(|(_, i)| self.points[*i].1.is_case()).count();
        cases as f64 / k as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransLearnConfig {
    /// Weight of `½‖Θ − Θ⁰‖²`.
    pub gamma: f64,
    /// Candidates tried by [`tune_gamma`].
    pub gamma_grid: Vec<f64>,
    /// Fraction of the training indices held out when tuning γ.
    pub validation_fraction: f64,
    pub train: TrainConfig,
}

impl Default for TransLearnConfig {
    fn default() -> Self {
        TransLearnConfig {
            gamma: 0.1,
            gamma_grid: vec![0.01, 0.1, 1.0],
            validation_fraction: 0.2,
            train: TrainConfig::default(),
        }
    }
}

/// Trains from `anchor` (the source-pretrained Θ⁰) on `indices` of the
/// target training split while pulling towards the anchor with weight γ.
pub fn train_translearn(
    learner: &SequenceLearner,
    anchor: &ParamSet,
    data: &DomainDataset,
    indices: &[usize],
    gamma: f64,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    if anchor.arch != learner.arch.tag() {
        return Err(Error::InvalidArchitecture(format!(
            "pretrained parameters are for {}, learner is {}",
            anchor.arch,
            learner.arch.tag()
        )));
    }
    let prox = Prox { anchor, gamma };
    fit(learner, anchor.clone(), data, indices, cfg, &[], Some(prox))
}

/// Picks γ from `cfg.gamma_grid` by AUROC on a stratified hold-out of
/// `indices`; ties go to the earlier candidate.
pub fn tune_gamma(
    learner: &SequenceLearner,
    anchor: &ParamSet,
    data: &DomainDataset,
    indices: &[usize],
    cfg: &TransLearnConfig,
) -> Result<f64> {
    if cfg.gamma_grid.is_empty() {
        return Ok(cfg.gamma);
    }
    let pool = data.with_train(indices)?;
    let fit_idx = subsample(&pool, 1.0 - cfg.validation_fraction, cfg.train.seed)?;
    let held: Vec<usize> = pool
        .train
        .iter()
        .copied()
        .filter(|i| fit_idx.binary_search(i).is_err())
        .collect();
    let validation = DomainDataset {
        name: data.name.clone(),
        patients: data.patients.clone(),
        train: fit_idx.clone(),
        test: held,
    };
    let mut best = (f64::NEG_INFINITY, cfg.gamma_grid[0]);
    for &gamma in &cfg.gamma_grid {
        let params = train_translearn(learner, anchor, &validation, &fit_idx, gamma, &cfg.train)?.params;
        let auroc = evaluate(&learner.arch, &params, &validation)?.auroc;
        info!("gamma {gamma}: validation auroc {auroc:.4}");
        if auroc > best.0 {
            best = (auroc, gamma);
        }
    }
    Ok(best.1)
}

fn head_name(domain: &str, name: &str) -> String {
    format!("{domain}/{name}")
}

/// Joint training of one shared embedding and encoder with a head per
/// domain. Each step draws a balanced batch of `cfg.batch_size` patients
/// from every domain's training split and sums the losses. An epoch is as
/// many steps as the largest training split has batches.
///
/// Returns one ordinary parameter set per domain; the shared tensors are
/// identical across them. A single domain is plain target-only training.
pub fn train_multilearn(
    learner: &SequenceLearner,
    domains: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<IndexMap<String, ParamSet>> {
    match domains {
        [] => return Err(Error::InvalidConfig("multitask training needs a domain".into())),
        [only] => {
            let p = train_supervised(learner, only, cfg)?;
            return Ok(IndexMap::from([(only.name.clone(), p)]));
        }
        _ => {}
    }
    cfg.validate()?;
    let arch = &learner.arch;
    let seeds = RunSeeds::new(cfg.seed);
    let base = init_params(arch, seeds.init)?;
    // combined set: shared tensors under their own names, heads prefixed
    let mut combined = ParamSet::new(format!("multitask/{}", arch.tag()));
    combined.buffers = base.buffers.clone();
    for (name, t) in base.iter().filter(|(n, _)| !arch.is_head(n)) {
        combined.insert(name, t.clone());
    }
    for (i, d) in domains.iter().enumerate() {
        let head_init = if i == 0 {
            base.clone()
        } else {
            init_params(arch, seeds.init.wrapping_add(i as u64))?
        };
        for (name, t) in head_init.iter().filter(|(n, _)| arch.is_head(n)) {
            combined.insert(head_name(&d.name, name), t.clone());
        }
    }
    let view = |all: &ParamExprs, domain: &str| -> ParamExprs {
        let exprs: IndexMap<String, Expr> = base
            .names()
            .map(|n| {
                let key = if arch.is_head(n) {
                    head_name(domain, n)
                } else {
                    n.to_string()
                };
                (n.to_string(), all.exprs[&key].clone())
            })
            .collect();
        ParamExprs {
            arch: base.arch.clone(),
            exprs,
        }
    };
    let steps_per_epoch = domains
        .iter()
        .map(|d| d.train.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(1);
    let theta = with_precision(cfg.precision, || -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.sampler);
        let mut adam = Adam::new(cfg.lr, cfg.adam);
        let mut theta = combined;
        for step in 0..cfg.epochs * steps_per_epoch {
            let vars = theta.variables();
            let mut total: Option<Expr> = None;
            let mut norm = Vec::new();
            for d in domains {
                let idx = sample_balanced(d, cfg.batch_size, &mut rng)?;
                let batch = d.batch(SplitTag::Train, &idx, d.sequence_cap(arch.max_len))?;
                let ev = learner.loss(&view(&vars, &d.name), &batch, Mode::Train)?;
                norm.extend(ev.norm);
                total = Some(match total {
                    Some(t) => t.add(&ev.loss)?,
                    None => ev.loss,
                });
            }
            let total = total.expect("at least two domains");
            let loss = total.value().item()?;
            if !(loss.abs() <= cfg.divergence_threshold) {
                return Err(Error::Diverged { iteration: step, loss });
            }
            let grads: IndexMap<String, Tensor> = gradient(&total, &vars, false)?
                .into_iter()
                .map(|(k, e)| (k, e.value().clone()))
                .collect();
            theta = adam.step(&theta, &grads)?;
            fold_norm_stats(&mut theta, &norm)?;
        }
        Ok(theta)
    })?;
    let mut out = IndexMap::new();
    for d in domains {
        let mut p = ParamSet::new(base.arch.clone());
        p.buffers = theta.buffers.clone();
        for name in base.names() {
            let key = if arch.is_head(name) {
                head_name(&d.name, name)
            } else {
                name.to_string()
            };
            p.insert(name, theta.get(&key)?.clone());
        }
        out.insert(d.name.clone(), p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Prox;

    fn record(i: usize, label: Label, codes: Vec<u32>) -> PatientRecord {
        PatientRecord {
            id: format!("p{i}"),
            domain: "d".into(),
            label,
            age: 70,
            visits: vec![codes],
        }
    }

    #[test]
    fn one_neighbour_recovers_training_labels() {
        let patients: Vec<_> = (0..12)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Case } else { Label::Control };
                record(i, label, vec![1 + i as u32; 1 + i % 3])
            })
            .collect();
        let d = DomainDataset::new("d", patients.clone());
        let knn = Knn::fit(&d, 20, 1).unwrap();
        for p in &patients {
            let pred = knn.predict(p) >= 0.5;
            assert_eq!(pred, p.label.is_case());
        }
    }

    #[test]
    fn knn_rejects_single_class() {
        let d = DomainDataset::new(
            "d",
            vec![record(0, Label::Case, vec![1]), record(1, Label::Case, vec![2])],
        );
        assert!(matches!(Knn::fit(&d, 5, 1), Err(Error::SingleClass)));
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let mut p = ParamSet::new("x");
        p.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let prox = Prox { anchor: &p, gamma: 3.0 };
        assert_eq!(prox.penalty(&p, ["w"]).unwrap(), 0.0);
    }
}
