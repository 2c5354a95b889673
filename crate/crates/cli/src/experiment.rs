//! The computations behind each subcommand for one seed, kept free of file
//! handling so they can be driven from tests as well as the CLI.

use std::collections::BTreeMap;

use anyhow::{anyhow, Context, Result};
use metapred::baselines::{train_multilearn, train_supervised, train_translearn, tune_gamma, Knn};
use metapred::data::{DomainDataset, SplitTag};
use metapred::episodes::split_train_test;
use metapred::eval::{evaluate, export_representations, fine_tune, meta_test, subsample, Evaluation, ReprRow};
use metapred::learner::SequenceLearner;
use metapred::meta::{meta_train, MetaConfig, TrainHistory};
use metapred::metrics::{score, RunResult};
use metapred::model::{Architecture, EncoderKind};
use metapred_autodiff::ParamSet;
use serde::{Deserialize, Serialize};

use crate::manifest::{BaselineMethod, ExperimentManifest};

/// The dataset split for one seed, with domains addressed by role.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub domains: Vec<DomainDataset>,
    sources: Vec<usize>,
    simulated_target: usize,
    target: usize,
}

impl SeedData {
    /// Splits every domain of `raw` with its own seed and resolves the
    /// manifest's roles.
    pub fn new(manifest: &ExperimentManifest, raw: &[DomainDataset], seed: u64) -> Result<Self> {
        let domains = raw
            .iter()
            .enumerate()
            .map(|(i, d)| split_train_test(d, manifest.dataset.test_fraction, manifest.split_seed(seed, i)))
            .collect::<metapred::Result<Vec<_>>>()?;
        let position = |name: &str| -> Result<usize> {
            domains.iter().position(|d| d.name == name).ok_or_else(|| {
                let known: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
                anyhow!("domain {name} is not in the dataset (have {})", known.join(", "))
            })
        };
        let roles = &manifest.roles;
        Ok(SeedData {
            seed,
            sources: roles.sources.iter().map(|s| position(s)).collect::<Result<_>>()?,
            simulated_target: position(&roles.simulated_target)?,
            target: position(&roles.target)?,
            domains,
        })
    }

    pub fn sources(&self) -> Vec<&DomainDataset> {
        self.sources.iter().map(|&i| &self.domains[i]).collect()
    }

    pub fn simulated_target(&self) -> &DomainDataset {
        &self.domains[self.simulated_target]
    }

    pub fn target(&self) -> &DomainDataset {
        &self.domains[self.target]
    }

    pub fn domain(&self, name: &str) -> Result<&DomainDataset> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| anyhow!("domain {name} is not in the dataset"))
    }

    /// The target with its training split cut down to a stratified
    /// ρ-fraction.
    pub fn target_subset(&self, rho: f64) -> Result<DomainDataset> {
        let t = self.target();
        Ok(t.with_train(&subsample(t, rho, self.seed)?)?)
    }
}

fn result(method: &str, target: &str, rho: f64, seed: u64, e: &Evaluation) -> RunResult {
    RunResult {
        method: method.to_string(),
        target: target.to_string(),
        rho,
        seed,
        auroc: e.auroc,
        f1: e.f1,
    }
}

pub fn learner(manifest: &ExperimentManifest) -> SequenceLearner {
    SequenceLearner::new(manifest.model.clone())
}

/// Meta-trains on the manifest's sources with the simulated target.
pub fn train_meta(manifest: &ExperimentManifest, data: &SeedData) -> Result<(ParamSet, TrainHistory)> {
    train_meta_with(manifest, data, &data.sources(), &manifest.meta_config(data.seed))
}

fn train_meta_with(
    manifest: &ExperimentManifest,
    data: &SeedData,
    sources: &[&DomainDataset],
    config: &MetaConfig,
) -> Result<(ParamSet, TrainHistory)> {
    meta_train(&learner(manifest), sources, data.simulated_target(), config).context("meta-training")
}

/// Adapts on source batches and scores the genuine target without using
/// any of its labels; reported at ρ = 0.
pub fn run_meta_test(manifest: &ExperimentManifest, data: &SeedData, theta: &ParamSet) -> Result<RunResult> {
    let e = meta_test(
        &learner(manifest),
        theta,
        &data.sources(),
        data.target(),
        &manifest.meta_test_config(data.seed),
    )?;
    Ok(result("metapred-adapt", &data.target().name, 0.0, data.seed, &e))
}

/// Fine-tunes the meta-learned parameters at every ρ of the sweep.
pub fn run_finetune(manifest: &ExperimentManifest, data: &SeedData, theta: &ParamSet) -> Result<Vec<RunResult>> {
    finetune_as("metapred", manifest, data, theta, &manifest.finetune.rhos)
}

fn finetune_as(
    method: &str,
    manifest: &ExperimentManifest,
    data: &SeedData,
    theta: &ParamSet,
    rhos: &[f64],
) -> Result<Vec<RunResult>> {
    let learner = learner(manifest);
    let target = data.target();
    rhos.iter()
        .map(|&rho| {
            let cfg = manifest.finetune.config(rho, data.seed);
            let params =
                fine_tune(&learner, theta, target, &cfg).with_context(|| format!("fine-tuning at rho {rho}"))?;
            let e = evaluate(&learner.arch, &params, target)?;
            log::info!(
                "seed {} {method} rho {rho}: auroc {:.4} f1 {:.4}",
                data.seed,
                e.auroc,
                e.f1
            );
            Ok(result(method, &target.name, rho, data.seed, &e))
        })
        .collect()
}

/// Results of one baseline over the ρ sweep, plus any tuned choices.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub results: Vec<RunResult>,
    pub notes: BTreeMap<String, f64>,
}

pub fn run_baseline(manifest: &ExperimentManifest, data: &SeedData, method: BaselineMethod) -> Result<BaselineRun> {
    let seed = data.seed;
    let cfg = manifest.baselines.train_config(seed);
    let learner = learner(manifest);
    let target = data.target();
    let tag = method.tag();
    let anchor = match method {
        BaselineMethod::TransLearn => {
            let name = manifest
                .baselines
                .pretrain_domain
                .as_deref()
                .unwrap_or(&manifest.roles.simulated_target);
            Some(train_supervised(&learner, data.domain(name)?, &cfg).context("pretraining the transfer anchor")?)
        }
        _ => None,
    };
    let mut run = BaselineRun {
        results: Vec::new(),
        notes: BTreeMap::new(),
    };
    for &rho in &manifest.finetune.rhos {
        let small = data.target_subset(rho)?;
        let e = match method {
            BaselineMethod::Supervised => evaluate(&learner.arch, &train_supervised(&learner, &small, &cfg)?, target)?,
            BaselineMethod::TransLearn => {
                let anchor = anchor.as_ref().expect("pretrained above");
                let tl = manifest.baselines.translearn_config(seed);
                let gamma = tune_gamma(&learner, anchor, &small, &small.train, &tl)?;
                run.notes.insert(format!("gamma@{rho}"), gamma);
                let params = train_translearn(&learner, anchor, &small, &small.train, gamma, &cfg)?.params;
                evaluate(&learner.arch, &params, target)?
            }
            BaselineMethod::MultiLearn => {
                let mut domains = vec![data.simulated_target()];
                domains.extend(data.sources());
                domains.push(&small);
                let heads = train_multilearn(&learner, &domains, &cfg)?;
                evaluate(&learner.arch, &heads[&target.name], target)?
            }
            BaselineMethod::Knn => {
                let knn = Knn::fit(&small, manifest.model.vocab, manifest.baselines.knn_k)?;
                let batch = target.split_batch(SplitTag::Test, target.sequence_cap(manifest.model.max_len))?;
                let probs: Vec<f64> = target.test.iter().map(|&i| knn.predict(&target.patients[i])).collect();
                let s = score(&probs, &batch.labels)?;
                Evaluation {
                    ids: batch.ids,
                    labels: batch.labels,
                    probs,
                    auroc: s.auroc,
                    f1: s.f1,
                }
            }
            BaselineMethod::Logistic => {
                let lr = SequenceLearner::new(Architecture {
                    encoder: EncoderKind::Logistic,
                    ..manifest.model.clone()
                });
                evaluate(&lr.arch, &train_supervised(&lr, &small, &cfg)?, target)?
            }
        };
        log::info!("seed {seed} {tag} rho {rho}: auroc {:.4} f1 {:.4}", e.auroc, e.f1);
        run.results.push(result(tag, &target.name, rho, seed, &e));
    }
    Ok(run)
}

/// Meta-training with the manifest's μ and with μ = 0 on the same episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub metapred: TrainHistory,
    pub maml: TrainHistory,
}

/// Outcome of one ablation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub mu: f64,
    pub final_auroc: Option<f64>,
    pub final_f1: Option<f64>,
    /// Variance of the trailing losses over the first loss.
    pub plateau_ratio: Option<f64>,
    pub plateaued: Option<bool>,
}

impl AblationRun {
    pub fn summaries(&self, manifest: &ExperimentManifest) -> [CurveSummary; 2] {
        let one = |h: &TrainHistory, mu: f64| {
            let ratio = h.plateau_ratio(manifest.ablation.window);
            let last = h.last_eval();
            CurveSummary {
                mu,
                final_auroc: last.map(|e| e.0),
                final_f1: last.map(|e| e.1),
                plateau_ratio: ratio,
                plateaued: ratio.map(|r| r < manifest.ablation.plateau_tolerance),
            }
        };
        [one(&self.metapred, manifest.meta.mu), one(&self.maml, 0.0)]
    }
}

pub fn run_ablation(manifest: &ExperimentManifest, data: &SeedData) -> Result<AblationRun> {
    let base = MetaConfig {
        eval_every: manifest.ablation.eval_every,
        ..manifest.meta_config(data.seed)
    };
    let maml = MetaConfig {
        mu: 0.0,
        ..base.clone()
    };
    let sources = data.sources();
    Ok(AblationRun {
        seed: data.seed,
        metapred: train_meta_with(manifest, data, &sources, &base)?.1,
        maml: train_meta_with(manifest, data, &sources, &maml)?.1,
    })
}

/// Meta-trains on each source set of the sweep and fine-tunes at its ρ.
pub fn run_source_sweep(manifest: &ExperimentManifest, data: &SeedData) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for combo in manifest.source_combinations() {
        let sources = combo.iter().map(|s| data.domain(s)).collect::<Result<Vec<_>>>()?;
        let (theta, _) = train_meta_with(manifest, data, &sources, &manifest.meta_config(data.seed))?;
        let method = format!("metapred[{}]", combo.join("+"));
        out.extend(finetune_as(
            &method,
            manifest,
            data,
            &theta,
            &[manifest.source_sweep.rho],
        )?);
    }
    Ok(out)
}

/// Penultimate activations of every test-split patient of the role
/// domains, domains in dataset order.
pub fn representations(manifest: &ExperimentManifest, data: &SeedData, theta: &ParamSet) -> Result<Vec<ReprRow>> {
    let roles = &manifest.roles;
    let in_role =
        |name: &str| name == roles.target || name == roles.simulated_target || roles.sources.iter().any(|s| s == name);
    let patients: Vec<_> = data
        .domains
        .iter()
        .filter(|d| in_role(&d.name))
        .flat_map(|d| d.test.iter().map(move |&i| &d.patients[i]))
        .collect();
    Ok(export_representations(&manifest.model, theta, &patients)?)
}
