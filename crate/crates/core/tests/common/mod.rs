#![allow(dead_code)]

use metapred::cohort::{generate_cohort, CohortSpec, DiseaseRegistry};
use metapred::data::DomainDataset;
use metapred::episodes::split_train_test;
use metapred::learner::SequenceLearner;
use metapred::model::{Architecture, EncoderKind};

/// Three small domains split 80/20.
pub fn small_domains(seed: u64) -> Vec<DomainDataset> {
    let spec = CohortSpec {
        domains: 3,
        cases_per_domain: 60,
        seed,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec, &DiseaseRegistry::standard()).unwrap();
    cohort
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| split_train_test(d, 0.2, seed + i as u64).unwrap())
        .collect()
}

pub fn small_learner(encoder: EncoderKind) -> SequenceLearner {
    SequenceLearner::new(Architecture {
        encoder,
        embed_dim: 8,
        filters: 4,
        mlp_hidden: vec![8],
        max_len: 16,
        ..Architecture::default()
    })
}
