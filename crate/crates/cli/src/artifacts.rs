//! Output layout and file writing. Every file is written to a temporary
//! sibling and renamed into place, so readers never see a partial file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use metapred::metrics::RunResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

/// Provenance plus results of one command for one seed. Carries no
/// timestamps so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    /// Base split seed; domain `i` is split with `split_seed + i`.
    pub split_seed: u64,
    pub dataset_hash: String,
    pub manifest_hash: String,
    pub results: Vec<RunResult>,
    /// Per-run choices worth keeping, such as tuned hyperparameters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, f64>,
}

/// Paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    pub fn meta_dir(&self, seed: u64) -> PathBuf {
        self.root.join("meta").join(format!("seed-{seed}"))
    }

    pub fn meta_params(&self, seed: u64) -> PathBuf {
        self.meta_dir(seed).join("params.json")
    }

    pub fn meta_history(&self, seed: u64) -> PathBuf {
        self.meta_dir(seed).join("history.jsonl")
    }

    pub fn meta_run(&self, seed: u64) -> PathBuf {
        self.meta_dir(seed).join("run.json")
    }

    pub fn meta_test(&self, seed: u64) -> PathBuf {
        self.root.join("meta-test").join(format!("seed-{seed}.json"))
    }

    pub fn finetune(&self, seed: u64) -> PathBuf {
        self.root.join("finetune").join(format!("seed-{seed}.json"))
    }

    pub fn baseline(&self, method: &str, seed: u64) -> PathBuf {
        self.root
            .join("baselines")
            .join(method)
            .join(format!("seed-{seed}.json"))
    }

    pub fn ablation_curves(&self) -> PathBuf {
        self.root.join("ablate-mu").join("curves.csv")
    }

    pub fn ablation_summary(&self) -> PathBuf {
        self.root.join("ablate-mu").join("summary.json")
    }

    pub fn source_sweep(&self, seed: u64) -> PathBuf {
        self.root.join("sweep-sources").join(format!("seed-{seed}.json"))
    }

    pub fn representations(&self, seed: u64) -> PathBuf {
        self.root.join("repr").join(format!("seed-{seed}.csv"))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn compare_csv(&self) -> PathBuf {
        self.root.join("compare.csv")
    }

    pub fn compare_txt(&self) -> PathBuf {
        self.root.join("compare.txt")
    }

    /// Every run record a `compare` may read, in a fixed order.
    pub fn run_records(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for dir in ["meta-test", "finetune", "sweep-sources"] {
            out.extend(json_files(&self.root.join(dir))?);
        }
        let baselines = self.root.join("baselines");
        if baselines.is_dir() {
            let mut methods: Vec<PathBuf> = std::fs::read_dir(&baselines)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            methods.sort();
            for m in methods {
                out.extend(json_files(&m)?);
            }
        }
        Ok(out)
    }
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}
