//! Meta-testing with fast adaptation, fine-tuning on a fraction of the
//! target training split, and representation export.

use std::io::Write;

use metapred_autodiff::{ParamSet, Precision};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, DomainDataset, Label, PatientRecord, SplitTag};
use crate::episodes::sample_balanced;
use crate::error::{Error, Result};
use crate::learner::SequenceLearner;
use crate::meta::inner_adapt;
use crate::metrics::{f1, score};
use crate::model::{predict, representations, Architecture};
use crate::train::{fit, Optimizer, TrainConfig};

/// Resource fractions of the standard sweep.
pub const RHO_SWEEP: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTestConfig {
    pub alpha: f64,
    /// Adaptation steps at test time.
    pub k: usize,
    pub n_per_domain: usize,
    /// Testing episodes whose adapted predictions are averaged.
    pub episodes: usize,
    pub seed: u64,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        MetaTestConfig {
            alpha: 0.01,
            k: 1,
            n_per_domain: 8,
            episodes: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub probs: Vec<f64>,
    pub auroc: f64,
    pub f1: f64,
}

impl Evaluation {
    pub fn new(batch: &Batch, probs: Vec<f64>) -> Result<Self> {
        let s = score(&probs, &batch.labels)?;
        Ok(Evaluation {
            ids: batch.ids.clone(),
            labels: batch.labels.clone(),
            probs,
            auroc: s.auroc,
            f1: s.f1,
        })
    }
}

/// Scores `params` on the whole test split of `target`.
pub fn evaluate(arch: &Architecture, params: &ParamSet, target: &DomainDataset) -> Result<Evaluation> {
    let batch = target.split_batch(SplitTag::Test, target.sequence_cap(arch.max_len))?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probs = predict(arch, params, &batch)?;
    Evaluation::new(&batch, probs)
}

/// Adapts `theta` on balanced batches from the source training splits, then
/// scores the target's test split. Only test-split patients of the target
/// are touched.
pub fn meta_test(
    learner: &SequenceLearner,
    theta: &ParamSet,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    cfg: &MetaTestConfig,
) -> Result<Evaluation> {
    if cfg.episodes == 0 || cfg.n_per_domain == 0 {
        return Err(Error::InvalidConfig(
            "testing episodes and patients per domain must be positive".into(),
        ));
    }
    let arch = &learner.arch;
    let batch = target.split_batch(SplitTag::Test, target.sequence_cap(arch.max_len))?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.require_split(SplitTag::Test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = vec![0.0; batch.len()];
    for _ in 0..cfg.episodes {
        let mut src = Vec::with_capacity(sources.len());
        for d in sources {
            let idx = sample_balanced(d, cfg.n_per_domain, &mut rng)?;
            src.push(d.batch(SplitTag::Train, &idx, d.sequence_cap(arch.max_len))?);
        }
        let adapted = if src.is_empty() || cfg.k == 0 {
            theta.clone()
        } else {
            let a = inner_adapt(learner, &theta.variables(), &src, cfg.alpha, cfg.k, false)?;
            a.params.values(&theta.buffers)
        };
        for (m, p) in mean.iter_mut().zip(predict(arch, &adapted, &batch)?) {
            *m += p;
        }
    }
    let n = cfg.episodes as f64;
    Evaluation::new(&batch, mean.into_iter().map(|p| p / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    /// Fraction of the target training split used.
    pub rho: f64,
    /// Parameters held fixed; `None` freezes embedding and encoder.
    pub frozen: Option<Vec<String>>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            rho: 0.2,
            frozen: None,
            lr: 3e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl FineTuneConfig {
    /// The training loop settings shared with target-only training.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: Optimizer::Adam,
            precision: self.precision,
            ..TrainConfig::default()
        }
    }
}

/// Stratified `⌈ρN⌉`-patient subset of the training split. Each class is
/// shuffled once per seed and a prefix is taken, so the subset for a larger
/// ρ contains the subset for a smaller one.
pub fn subsample(data: &DomainDataset, rho: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("rho must lie in (0, 1], got {rho}")));
    }
    let n = data.train.len();
    let total = ((rho * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = data.class_indices(SplitTag::Train, Label::Case);
    let mut controls = data.class_indices(SplitTag::Train, Label::Control);
    cases.shuffle(&mut rng);
    controls.shuffle(&mut rng);
    if total < 2 || cases.is_empty() || controls.is_empty() {
        return Err(Error::SingleClass);
    }
    let want_cases = ((total as f64 * cases.len() as f64 / n as f64).round() as usize)
        .clamp(1, total - 1)
        .min(cases.len());
    let want_controls = (total - want_cases).min(controls.len());
    let mut picked: Vec<usize> = cases[..want_cases]
        .iter()
        .chain(&controls[..want_controls])
        .copied()
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Fine-tunes `theta_star` on a stratified ρ-fraction of the target
/// training split. Frozen parameters come back bit-identical.
pub fn fine_tune(
    learner: &SequenceLearner,
    theta_star: &ParamSet,
    target: &DomainDataset,
    cfg: &FineTuneConfig,
) -> Result<ParamSet> {
    let indices = subsample(target, cfg.rho, cfg.seed)?;
    let frozen = match &cfg.frozen {
        Some(f) => f.clone(),
        None => learner.arch.default_frozen(theta_star),
    };
    Ok(fit(
        learner,
        theta_star.clone(),
        target,
        &indices,
        &cfg.train_config(),
        &frozen,
        None,
    )?
    .params)
}

/// One exported row: the penultimate activation of a patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprRow {
    pub domain: String,
    pub label: Label,
    pub features: Vec<f64>,
}

/// Penultimate-layer activations in evaluation mode, in patient order.
pub fn export_representations(
    arch: &Architecture,
    theta: &ParamSet,
    patients: &[&PatientRecord],
) -> Result<Vec<ReprRow>> {
    const CHUNK: usize = 256;
    let mut rows = Vec::with_capacity(patients.len());
    for chunk in patients.chunks(CHUNK) {
        // each chunk is a mixed set, so it carries no single domain or split
        let batch = Batch::from_records("", SplitTag::Test, chunk, arch.max_len)?;
        for (p, features) in chunk.iter().zip(representations(arch, theta, &batch)?) {
            rows.push(ReprRow {
                domain: p.domain.clone(),
                label: p.label,
                features,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `domain,label,f0..f{n-1}`.
pub fn write_representations_csv(rows: &[ReprRow], mut out: impl Write) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut header = String::from("domain,label");
    for i in 0..width {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(out, "{header}")?;
    for r in rows {
        write!(out, "{},{}", r.domain, u8::from(r.label))?;
        for v in &r.features {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// F1 of a fitted model on the target's test split.
pub fn test_f1(arch: &Architecture, params: &ParamSet, target: &DomainDataset) -> Result<f64> {
    let e = evaluate(arch, params, target)?;
    f1(&e.probs, &e.labels)
}
