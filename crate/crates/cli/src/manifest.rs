//! Experiment manifests: one TOML file naming the dataset, the domain roles
//! and every training setting of a study.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use metapred::baselines::TransLearnConfig;
use metapred::cohort::CohortSpec;
use metapred::eval::{FineTuneConfig, MetaTestConfig, RHO_SWEEP};
use metapred::meta::MetaConfig;
use metapred::model::Architecture;
use metapred::train::TrainConfig;
use metapred_autodiff::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Run seeds. Each seed fixes the splits, initializations and samplers
    /// of one paired run of every method.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory; relative paths are taken from the manifest's
    /// directory. `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub roles: Roles,
    #[serde(default)]
    pub model: Architecture,
    /// Its `seed` is replaced by the run seed.
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub meta_test: MetaTestConfig,
    #[serde(default)]
    pub finetune: FineTuneSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub source_sweep: SourceSweepSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Line-delimited patients. Relative paths live in the output directory.
    pub path: PathBuf,
    pub test_fraction: f64,
    /// Added to the run seed and the domain position to seed each split.
    pub split_seed: u64,
    /// Used by `generate`.
    pub spec: CohortSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::from("cohort.jsonl"),
            test_fraction: 0.2,
            split_seed: 0,
            spec: CohortSpec::default(),
        }
    }
}

/// Which domain plays which part. The simulated target stands in for the
/// genuine target during meta-training; the genuine target is only seen
/// at evaluation and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub sources: Vec<String>,
    pub simulated_target: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub rhos: Vec<f64>,
    /// `None` freezes the embedding and encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen: Option<Vec<String>>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        let d = FineTuneConfig::default();
        FineTuneSection {
            rhos: RHO_SWEEP.to_vec(),
            frozen: d.frozen,
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            precision: d.precision,
        }
    }
}

impl FineTuneSection {
    pub fn config(&self, rho: f64, seed: u64) -> FineTuneConfig {
        FineTuneConfig {
            rho,
            frozen: self.frozen.clone(),
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    /// The manifest's model trained on target data only.
    Supervised,
    /// Training from a source-pretrained model with a pull towards it.
    #[serde(rename = "translearn")]
    #[value(name = "translearn")]
    TransLearn,
    /// Shared encoder with a head per domain.
    #[serde(rename = "multilearn")]
    #[value(name = "multilearn")]
    MultiLearn,
    /// Nearest neighbours on code counts.
    Knn,
    /// Logistic regression on code counts.
    Logistic,
}

impl BaselineMethod {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineMethod::Supervised => "supervised",
            BaselineMethod::TransLearn => "translearn",
            BaselineMethod::MultiLearn => "multilearn",
            BaselineMethod::Knn => "knn",
            BaselineMethod::Logistic => "logistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub methods: Vec<BaselineMethod>,
    /// Its `seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub gamma_grid: Vec<f64>,
    pub validation_fraction: f64,
    /// Domain the transfer baseline is pretrained on; defaults to the
    /// simulated target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_domain: Option<String>,
    pub knn_k: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let t = TransLearnConfig::default();
        BaselineSection {
            methods: vec![
                BaselineMethod::Supervised,
                BaselineMethod::TransLearn,
                BaselineMethod::MultiLearn,
            ],
            train: TrainConfig::default(),
            gamma_grid: t.gamma_grid,
            validation_fraction: t.validation_fraction,
            pretrain_domain: None,
            knn_k: metapred::baselines::Knn::DEFAULT_K,
        }
    }
}

impl BaselineSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn translearn_config(&self, seed: u64) -> TransLearnConfig {
        TransLearnConfig {
            gamma: self
                .gamma_grid
                .first()
                .copied()
                .unwrap_or(TransLearnConfig::default().gamma),
            gamma_grid: self.gamma_grid.clone(),
            validation_fraction: self.validation_fraction,
            train: self.train_config(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Evaluate on the simulated target every this many iterations.
    pub eval_every: usize,
    /// Trailing iterations whose loss variance decides the plateau.
    pub window: usize,
    /// Largest accepted ratio of tail variance to the initial loss.
    pub plateau_tolerance: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            eval_every: 10,
            window: 50,
            plateau_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSweepSection {
    /// Source sets to meta-train on; empty means each source alone and then
    /// all of them together.
    pub combinations: Vec<Vec<String>>,
    pub rho: f64,
}

impl Default for SourceSweepSection {
    fn default() -> Self {
        SourceSweepSection {
            combinations: Vec::new(),
            rho: 0.2,
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: ExperimentManifest = toml::from_str(text).context("invalid manifest")?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Hex SHA-256 of the canonical serialization, so formatting and
    /// comments do not change it.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.roles;
        ensure!(!self.seeds.is_empty(), "seeds: at least one seed is needed");
        ensure!(
            !r.sources.is_empty(),
            "roles.sources: at least one source domain is needed"
        );
        for (i, s) in r.sources.iter().enumerate() {
            ensure!(!r.sources[..i].contains(s), "roles.sources: {s} is listed twice");
        }
        ensure!(
            !r.sources.contains(&r.simulated_target),
            "roles.simulated_target: {} is also a source",
            r.simulated_target
        );
        ensure!(
            !r.sources.contains(&r.target) && r.target != r.simulated_target,
            "roles.target: {} must differ from the sources and the simulated target",
            r.target
        );
        let tf = self.dataset.test_fraction;
        ensure!(
            tf > 0.0 && tf < 1.0,
            "dataset.test_fraction: must lie in (0, 1), got {tf}"
        );
        self.meta.validate().context("meta")?;
        ensure!(
            !self.finetune.rhos.is_empty(),
            "finetune.rhos: at least one fraction is needed"
        );
        for &rho in &self.finetune.rhos {
            ensure!(rho > 0.0 && rho <= 1.0, "finetune.rhos: {rho} is outside (0, 1]");
        }
        if let Some(p) = &self.baselines.pretrain_domain {
            ensure!(
                *p != r.target,
                "baselines.pretrain_domain: pretraining on the target would leak its test patients"
            );
        }
        ensure!(self.baselines.knn_k > 0, "baselines.knn_k: must be positive");
        let vf = self.baselines.validation_fraction;
        ensure!(
            vf > 0.0 && vf < 1.0,
            "baselines.validation_fraction: must lie in (0, 1), got {vf}"
        );
        ensure!(
            self.ablation.eval_every > 0 && self.ablation.window > 0,
            "ablation: eval_every and window must be positive"
        );
        for (i, combo) in self.source_sweep.combinations.iter().enumerate() {
            ensure!(!combo.is_empty(), "source_sweep.combinations[{i}]: empty source set");
            for d in combo {
                if *d == r.target || *d == r.simulated_target {
                    bail!("source_sweep.combinations[{i}]: {d} is a target, not a source");
                }
            }
        }
        let rho = self.source_sweep.rho;
        ensure!(rho > 0.0 && rho <= 1.0, "source_sweep.rho: {rho} is outside (0, 1]");
        Ok(())
    }

    /// Source sets for the source-combination study.
    pub fn source_combinations(&self) -> Vec<Vec<String>> {
        if !self.source_sweep.combinations.is_empty() {
            return self.source_sweep.combinations.clone();
        }
        let mut out: Vec<Vec<String>> = self.roles.sources.iter().map(|s| vec![s.clone()]).collect();
        if self.roles.sources.len() > 1 {
            out.push(self.roles.sources.clone());
        }
        out
    }

    pub fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            seed,
            ..self.meta.clone()
        }
    }

    pub fn meta_test_config(&self, seed: u64) -> MetaTestConfig {
        MetaTestConfig {
            seed,
            ..self.meta_test.clone()
        }
    }

    /// Seed of the train/test split of the domain at `position` in the
    /// dataset file.
    pub fn split_seed(&self, seed: u64, position: usize) -> u64 {
        self.dataset.split_seed.wrapping_add(seed).wrapping_add(position as u64)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
