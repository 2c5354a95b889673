//! Line-delimited cohort files with a sidecar manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::CohortSpec;
use crate::data::{DomainDataset, PatientRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub domains: Vec<String>,
    pub vocab: usize,
    pub spec: CohortSpec,
    pub seed: u64,
}

/// `cohort.jsonl` → `cohort.manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest.json")
}

/// One patient per line, domains in order.
pub fn write_patients(domains: &[DomainDataset], mut out: impl Write) -> Result<()> {
    for d in domains {
        for p in &d.patients {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads patients and groups them by domain in order of first appearance.
/// Every patient starts in the training split.
pub fn read_patients(input: impl BufRead) -> Result<Vec<DomainDataset>> {
    let mut groups: Vec<(String, Vec<PatientRecord>)> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PatientRecord =
            serde_json::from_str(&line).map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        match groups.iter_mut().find(|(name, _)| *name == p.domain) {
            Some((_, v)) => v.push(p),
            None => groups.push((p.domain.clone(), vec![p])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(name, v)| DomainDataset::new(name, v))
        .collect())
}

pub fn save(path: &Path, domains: &[DomainDataset], manifest: &CohortManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_patients(domains, &mut w)?;
    w.flush()?;
    let m = File::create(manifest_path(path))?;
    serde_json::to_writer_pretty(m, manifest)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<DomainDataset>, Option<CohortManifest>)> {
    let domains = read_patients(BufReader::new(File::open(path)?))?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        Some(serde_json::from_reader(BufReader::new(File::open(mpath)?))?)
    } else {
        None
    };
    Ok((domains, manifest))
}
