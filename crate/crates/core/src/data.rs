//! Patient records, labeled domains and model batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Control,
    Case,
}

impl Label {
    pub fn is_case(self) -> bool {
        self == Label::Case
    }

    /// One-hot row `[case, control]`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Case => [1.0, 0.0],
            Label::Control => [0.0, 1.0],
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Case => Label::Control,
            Label::Control => Label::Case,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.is_case() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Case),
            _ => Err(format!("label must be 0 or 1, got {v}")),
        }
    }
}

/// One patient: visits in time order, each a list of code-group indices
/// (index 0 is reserved for padding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub domain: String,
    pub label: Label,
    pub age: u32,
    pub visits: Vec<Vec<u32>>,
}

impl PatientRecord {
    /// Occurrence counts per code index.
    pub fn code_counts(&self, vocab: usize) -> Vec<f64> {
        let mut counts = vec![0.0; vocab];
        for &c in self.visits.iter().flatten() {
            if let Some(slot) = counts.get_mut(c as usize) {
                *slot += 1.0;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Labeled patients of one disease domain with a train/test partition of
/// their indices. Both index lists are kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub name: String,
    pub patients: Vec<PatientRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DomainDataset {
    /// All patients start in the training split.
    pub fn new(name: impl Into<String>, patients: Vec<PatientRecord>) -> Self {
        let train = (0..patients.len()).collect();
        DomainDataset {
            name: name.into(),
            patients,
            train,
            test: Vec::new(),
        }
    }

    pub fn indices(&self, split: SplitTag) -> &[usize] {
        match split {
            SplitTag::Train => &self.train,
            SplitTag::Test => &self.test,
        }
    }

    /// Indices of `split` with the given label, in split order.
    pub fn class_indices(&self, split: SplitTag, label: Label) -> Vec<usize> {
        self.indices(split)
            .iter()
            .copied()
            .filter(|&i| self.patients[i].label == label)
            .collect()
    }

    pub fn mean_visits(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        let total: usize = self.patients.iter().map(|p| p.visits.len()).sum();
        total as f64 / self.patients.len() as f64
    }

    /// Sequence cap for this domain: mean visit count rounded up, at most
    /// `max_len`, at least 1.
    pub fn sequence_cap(&self, max_len: usize) -> usize {
        (self.mean_visits().ceil() as usize).clamp(1, max_len.max(1))
    }

    /// Builds a batch from patient indices of `split`, keeping at most the
    /// `cap` most recent visits per patient.
    pub fn batch(&self, split: SplitTag, indices: &[usize], cap: usize) -> Result<Batch> {
        let allowed = self.indices(split);
        let mut patients = Vec::with_capacity(indices.len());
        for &i in indices {
            if allowed.binary_search(&i).is_err() {
                return Err(Error::SplitViolation(format!(
                    "patient {i} of {} is not in the {split:?} split",
                    self.name
                )));
            }
            patients.push(&self.patients[i]);
        }
        Batch::from_records(&self.name, split, &patients, cap)
    }

    /// Copy whose training split is reduced to `indices` (a subset of the
    /// current one); the test split is unchanged.
    pub fn with_train(&self, indices: &[usize]) -> Result<DomainDataset> {
        let mut train = indices.to_vec();
        train.sort_unstable();
        train.dedup();
        if let Some(i) = train.iter().find(|i| self.train.binary_search(i).is_err()) {
            return Err(Error::SplitViolation(format!(
                "patient {i} of {} is not in the training split",
                self.name
            )));
        }
        Ok(DomainDataset {
            name: self.name.clone(),
            patients: self.patients.clone(),
            train,
            test: self.test.clone(),
        })
    }

    /// Batch of a whole split.
    pub fn split_batch(&self, split: SplitTag, cap: usize) -> Result<Batch> {
        self.batch(split, &self.indices(split).to_vec(), cap)
    }
}

/// Padded-sequence input for the learners. Sequences are stored unpadded;
/// models lay them out with the padding index as needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domain: String,
    pub split: SplitTag,
    pub ids: Vec<String>,
    pub visits: Vec<Vec<Vec<u32>>>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_records(domain: &str, split: SplitTag, records: &[&PatientRecord], cap: usize) -> Result<Batch> {
        let cap = cap.max(1);
        let mut batch = Batch {
            domain: domain.to_string(),
            split,
            ids: Vec::with_capacity(records.len()),
            visits: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
        };
        for r in records {
            let skip = r.visits.len().saturating_sub(cap);
            batch.ids.push(r.id.clone());
            batch.visits.push(r.visits[skip..].to_vec());
            batch.labels.push(r.label);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.visits.iter().map(Vec::len).collect()
    }

    pub fn max_len(&self) -> usize {
        self.visits.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks code ranges and non-empty sequences.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (id, seq) in self.ids.iter().zip(&self.visits) {
            if seq.is_empty() {
                return Err(Error::EmptySequence { id: id.clone() });
            }
            for &c in seq.iter().flatten() {
                if c == 0 || c as usize >= vocab {
                    return Err(Error::CodeOutOfRange { index: c, vocab });
                }
            }
        }
        Ok(())
    }

    /// Reorders patients by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Batch {
        Batch {
            domain: self.domain.clone(),
            split: self.split,
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            visits: order.iter().map(|&i| self.visits[i].clone()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Fails unless the batch comes from the expected split.
    pub fn require_split(&self, split: SplitTag) -> Result<()> {
        if self.split == split {
            Ok(())
        } else {
            Err(Error::SplitViolation(format!(
                "expected a {split:?} batch of {}, got {:?}",
                self.domain, self.split
            )))
        }
    }
}
