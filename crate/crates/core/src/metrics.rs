//! Ranking and thresholded scores, and aggregation across seeds.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Decision threshold on the case probability.
pub const THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties counted
/// one half (average ranks).
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_case()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k].is_case()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of the case class from hard predictions; zero when there are no true
/// positives.
pub fn f1_predictions(predicted_case: &[bool], labels: &[Label]) -> Result<f64> {
    if predicted_case.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictions for {} labels",
            predicted_case.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, l) in predicted_case.iter().zip(labels) {
        match (p, l.is_case()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// F1 with case predicted when the probability is at least `threshold`.
pub fn f1_at(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    f1_predictions(&predicted, labels)
}

/// F1 at [`THRESHOLD`].
pub fn f1(scores: &[f64], labels: &[Label]) -> Result<f64> {
    f1_at(scores, labels, THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub auroc: f64,
    pub f1: f64,
}

pub fn score(probs: &[f64], labels: &[Label]) -> Result<Scores> {
    Ok(Scores {
        auroc: auroc(probs, labels)?,
        f1: f1(probs, labels)?,
    })
}

/// Mean and sample standard deviation; the deviation is undefined for a
/// single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    /// `0.7876 (.02)`, or `0.7876 (-)` without a deviation.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => {
                let two = format!("{s:.2}");
                format!("{:.4} ({})", self.mean, two.strip_prefix('0').unwrap_or(&two))
            }
            None => format!("{:.4} (-)", self.mean),
        }
    }
}

/// Mean and sample standard deviation of one group of values.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Summary { mean, std, n })
}

/// Scores of one method on one target at one resource level and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub target: String,
    pub rho: f64,
    pub seed: u64,
    pub auroc: f64,
    pub f1: f64,
}

pub const RESULTS_HEADER: &str = "method,target,rho,seed,auroc,f1";

impl RunResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.target, self.rho, self.seed, self.auroc, self.f1
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub target: String,
    pub rho: f64,
    pub auroc: Summary,
    pub f1: Summary,
}

/// Groups by (method, target, ρ) in order of first appearance.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    if results.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut groups: Vec<(&str, &str, f64, Vec<&RunResult>)> = Vec::new();
    for r in results {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.method && g.1 == r.target && g.2 == r.rho)
        {
            Some(g) => g.3.push(r),
            None => groups.push((&r.method, &r.target, r.rho, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(method, target, rho, runs)| {
            let a: Vec<f64> = runs.iter().map(|r| r.auroc).collect();
            let f: Vec<f64> = runs.iter().map(|r| r.f1).collect();
            Ok(AggregateRow {
                method: method.to_string(),
                target: target.to_string(),
                rho,
                auroc: summarize(&a)?,
                f1: summarize(&f)?,
            })
        })
        .collect()
}

/// Aligned text table, one line per aggregate row.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let w = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let t = rows.iter().map(|r| r.target.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<w$}  {:<t$}  {:>4}  {:<13}  {:<13}\n",
        "method", "target", "rho", "AUROC", "F1"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:<t$}  {:>4}  {:<13}  {:<13}\n",
            r.method,
            r.target,
            r.rho,
            r.auroc.display(),
            r.f1.display()
        ));
    }
    out
}
