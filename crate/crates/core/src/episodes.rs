//! Stratified splitting and episode sampling.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, DomainDataset, Label, SplitTag};
use crate::error::{Error, Result};

/// Stratified train/test split: each class sends `round(fraction · n)`
/// patients (at least one, and leaving at least one) to the test side.
pub fn split_train_test(domain: &DomainDataset, test_fraction: f64, seed: u64) -> Result<DomainDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, class) in [(Label::Case, "case"), (Label::Control, "control")] {
        let mut members: Vec<usize> = (0..domain.patients.len())
            .filter(|&i| domain.patients[i].label == label)
            .collect();
        if members.len() < 2 {
            return Err(Error::InsufficientPatients {
                domain: domain.name.clone(),
                class,
                needed: 2,
                available: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_test = ((test_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DomainDataset {
        name: domain.name.clone(),
        patients: domain.patients.clone(),
        train,
        test,
    })
}

/// One meta-learning sample: a batch per source domain and one from the
/// simulated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<B> {
    pub sources: Vec<B>,
    pub target: B,
}

/// Draws `⌈n/2⌉` cases and `⌊n/2⌋` controls without replacement from the
/// training split of `domain`.
pub fn sample_balanced(domain: &DomainDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut picked = Vec::with_capacity(n);
    for (label, class, want) in [(Label::Case, "case", n.div_ceil(2)), (Label::Control, "control", n / 2)] {
        let pool = domain.class_indices(SplitTag::Train, label);
        if pool.len() < want {
            return Err(Error::InsufficientPatients {
                domain: domain.name.clone(),
                class,
                needed: want,
                available: pool.len(),
            });
        }
        picked.extend(sample_indices(rng, pool.len(), want).into_iter().map(|k| pool[k]));
    }
    Ok(picked)
}

/// Samples one episode from the training splits of `sources` and `target`.
/// `max_len` caps sequence lengths (see [`DomainDataset::sequence_cap`]).
pub fn sample_episode(
    sources: &[&DomainDataset],
    target: &DomainDataset,
    n_per_domain: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode<Batch>> {
    if n_per_domain == 0 {
        return Err(Error::InvalidConfig("patients per domain must be positive".into()));
    }
    let mut batches = Vec::with_capacity(sources.len());
    for d in sources {
        let idx = sample_balanced(d, n_per_domain, rng)?;
        batches.push(d.batch(SplitTag::Train, &idx, d.sequence_cap(max_len))?);
    }
    let idx = sample_balanced(target, n_per_domain, rng)?;
    let target_batch = target.batch(SplitTag::Train, &idx, target.sequence_cap(max_len))?;
    Ok(Episode {
        sources: batches,
        target: target_batch,
    })
}

/// `batch_size` independent episodes.
pub fn sample_episode_batch(
    sources: &[&DomainDataset],
    target: &DomainDataset,
    n_per_domain: usize,
    max_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode<Batch>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("episode batch size must be positive".into()));
    }
    (0..batch_size)
        .map(|_| sample_episode(sources, target, n_per_domain, max_len, rng))
        .collect()
}

/// Owns the RNG for one training run and the fixed domain roles.
pub struct EpisodeSampler<'a> {
    sources: Vec<&'a DomainDataset>,
    target: &'a DomainDataset,
    n_per_domain: usize,
    max_len: usize,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        sources: Vec<&'a DomainDataset>,
        target: &'a DomainDataset,
        n_per_domain: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if sources.iter().any(|s| s.name == target.name) {
            return Err(Error::InvalidConfig(format!(
                "simulated target {} is also listed as a source",
                target.name
            )));
        }
        Ok(EpisodeSampler {
            sources,
            target,
            n_per_domain,
            max_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Result<Episode<Batch>> {
        sample_episode(
            &self.sources,
            self.target,
            self.n_per_domain,
            self.max_len,
            &mut self.rng,
        )
    }

    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<Episode<Batch>>> {
        sample_episode_batch(
            &self.sources,
            self.target,
            self.n_per_domain,
            self.max_len,
            batch_size,
            &mut self.rng,
        )
    }
}
