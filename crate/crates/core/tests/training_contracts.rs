//! Contracts of fine-tuning and the comparison methods on small synthetic
//! domains.

mod common;

use common::{small_domains, small_learner};
use metapred::baselines::{train_multilearn, train_supervised, train_supervised_from, train_translearn, Knn};
use metapred::data::{DomainDataset, Label, PatientRecord, SplitTag};
use metapred::eval::{evaluate, export_representations, fine_tune, meta_test, FineTuneConfig, MetaTestConfig};
use metapred::learner::{Learner, SequenceLearner};
use metapred::model::{predict, Architecture, EncoderKind, Mode};
use metapred::train::{fit, Optimizer, Prox, TrainConfig};
use metapred::Error;
use metapred_autodiff::{ParamSet, Precision, Tensor};

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        lr: 3e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn fine_tuning_leaves_frozen_tensors_bit_identical() {
    let ds = small_domains(1);
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        let learner = small_learner(encoder);
        let theta = train_supervised(&learner, &ds[1], &quick(1)).unwrap();
        let cfg = FineTuneConfig {
            rho: 0.4,
            epochs: 3,
            seed: 5,
            ..FineTuneConfig::default()
        };
        let tuned = fine_tune(&learner, &theta, &ds[0], &cfg).unwrap();
        let frozen = learner.arch.default_frozen(&theta);
        assert!(frozen.iter().any(|n| n.starts_with("embedding")));
        for (name, before) in theta.iter() {
            let after = tuned.get(name).unwrap();
            if frozen.iter().any(|f| f == name) {
                assert_eq!(before.data(), after.data(), "{encoder:?}: frozen {name} moved");
            } else {
                assert_ne!(before.data(), after.data(), "{encoder:?}: head {name} did not move");
            }
        }
        assert_eq!(
            theta.buffers, tuned.buffers,
            "running statistics belong to the frozen encoder"
        );
    }
}

#[test]
fn full_unfrozen_fine_tuning_is_supervised_training_from_the_same_start() {
    let ds = small_domains(2);
    let learner = small_learner(EncoderKind::Cnn);
    let theta = learner.init(9).unwrap();
    let cfg = FineTuneConfig {
        rho: 1.0,
        frozen: Some(vec![]),
        epochs: 2,
        lr: 2e-3,
        seed: 4,
        ..FineTuneConfig::default()
    };
    let a = fine_tune(&learner, &theta, &ds[0], &cfg).unwrap();
    let b = train_supervised_from(&learner, theta, &ds[0], &cfg.train_config()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_frozen_names_are_rejected() {
    let ds = small_domains(2);
    let learner = small_learner(EncoderKind::Cnn);
    let theta = learner.init(0).unwrap();
    let cfg = FineTuneConfig {
        frozen: Some(vec!["no.such.tensor".into()]),
        ..FineTuneConfig::default()
    };
    assert!(fine_tune(&learner, &theta, &ds[0], &cfg).is_err());
}

#[test]
fn huge_penalty_pins_the_anchor() {
    let ds = small_domains(3);
    let learner = small_learner(EncoderKind::Cnn);
    let anchor = train_supervised(&learner, &ds[1], &quick(3)).unwrap();
    let out = train_translearn(&learner, &anchor, &ds[0], &ds[0].train, 1e6, &quick(3)).unwrap();
    let dist = out.params.squared_distance(&anchor).unwrap().sqrt();
    assert!(dist <= 1e-3, "moved {dist}");
}

#[test]
fn zero_penalty_is_supervised_training_from_the_anchor() {
    let ds = small_domains(3);
    let learner = small_learner(EncoderKind::Lstm);
    let anchor = train_supervised(&learner, &ds[1], &quick(3)).unwrap();
    let cfg = quick(8);
    let tl = train_translearn(&learner, &anchor, &ds[0], &ds[0].train, 0.0, &cfg).unwrap();
    let sup = train_supervised_from(&learner, anchor, &ds[0], &cfg).unwrap();
    assert_eq!(tl.params, sup);
}

#[test]
fn full_batch_penalized_objective_never_increases() {
    let ds = small_domains(4);
    let learner = SequenceLearner::new(Architecture {
        normalize: false,
        ..small_learner(EncoderKind::Cnn).arch
    });
    let anchor = train_supervised(&learner, &ds[1], &quick(4)).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        lr: 0.05,
        epochs: 25,
        batch_size: ds[0].train.len(),
        precision: Precision::Double,
        ..TrainConfig::default()
    };
    let out = train_translearn(&learner, &anchor, &ds[0], &ds[0].train, 0.5, &cfg).unwrap();
    for w in out.epoch_objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "objective rose: {:?}", out.epoch_objective);
    }
    assert!(out.epoch_objective.last() < out.epoch_objective.first());
}

#[test]
fn penalty_ignores_parameter_order() {
    let mut a = ParamSet::new("x");
    a.insert("u", Tensor::new(vec![2], vec![0.3, -1.2]).unwrap());
    a.insert("w", Tensor::new(vec![3], vec![2.0, 0.5, -0.25]).unwrap());
    let mut b = ParamSet::new("x");
    b.insert("w", Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
    b.insert("u", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let mut anchor = ParamSet::new("x");
    anchor.insert("u", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    anchor.insert("w", Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
    let prox = Prox {
        anchor: &anchor,
        gamma: 2.0,
    };
    let forward = prox.penalty(&a, ["u", "w"]).unwrap();
    let backward = prox.penalty(&a, ["w", "u"]).unwrap();
    // ½·2·(0.09 + 1.44 + 1 + 0.25 + 0.0625)
    assert!((forward - 2.8425).abs() < 1e-12);
    assert!((forward - backward).abs() < 1e-12);
    assert_eq!(prox.penalty(&b, ["u", "w"]).unwrap(), 0.0);
}

#[test]
fn translearn_rejects_a_foreign_anchor() {
    let ds = small_domains(5);
    let learner = small_learner(EncoderKind::Cnn);
    let other = small_learner(EncoderKind::Lstm);
    let anchor = other.init(0).unwrap();
    assert!(matches!(
        train_translearn(&learner, &anchor, &ds[0], &ds[0].train, 0.1, &quick(0)),
        Err(Error::InvalidArchitecture(_))
    ));
}

#[test]
fn multitask_shares_the_encoder_and_keeps_heads_apart() {
    let ds = small_domains(6);
    let learner = small_learner(EncoderKind::Cnn);
    let doms: Vec<&DomainDataset> = ds.iter().collect();
    let out = train_multilearn(&learner, &doms, &quick(6)).unwrap();
    assert_eq!(out.len(), 3);
    let sets: Vec<&ParamSet> = out.values().collect();
    for name in learner.arch.default_frozen(sets[0]) {
        for s in &sets[1..] {
            assert_eq!(sets[0].get(&name).unwrap(), s.get(&name).unwrap(), "{name} not shared");
        }
    }
    assert_ne!(
        sets[0].get("mlp.0.weight").unwrap(),
        sets[1].get("mlp.0.weight").unwrap()
    );
    for (d, p) in doms.iter().zip(&sets) {
        evaluate(&learner.arch, p, d).unwrap();
    }
}

#[test]
fn duplicated_domain_heads_reach_similar_losses() {
    let ds = small_domains(7);
    let learner = small_learner(EncoderKind::Cnn);
    let mut twin = ds[0].clone();
    twin.name = "twin".into();
    for p in &mut twin.patients {
        p.domain = "twin".into();
    }
    let cfg = TrainConfig {
        epochs: 20,
        lr: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train_multilearn(&learner, &[&ds[0], &twin], &cfg).unwrap();
    // held out: both heads drive the training loss to nearly zero
    let batch = ds[0]
        .split_batch(SplitTag::Test, ds[0].sequence_cap(learner.arch.max_len))
        .unwrap();
    let loss = |p: &ParamSet| {
        learner
            .loss(&p.constants(), &batch, Mode::Eval(&p.buffers))
            .unwrap()
            .loss
            .value()
            .item()
            .unwrap()
    };
    let (a, b) = (loss(&out[&ds[0].name]), loss(&out["twin"]));
    assert!((a - b).abs() <= 0.1 * a.max(b), "{a} vs {b}");
}

#[test]
fn single_domain_multitask_is_supervised_training() {
    let ds = small_domains(8);
    let learner = small_learner(EncoderKind::Cnn);
    let out = train_multilearn(&learner, &[&ds[0]], &quick(8)).unwrap();
    assert_eq!(out[&ds[0].name], train_supervised(&learner, &ds[0], &quick(8)).unwrap());
}

#[test]
fn supervised_training_is_seeded() {
    let ds = small_domains(9);
    let learner = small_learner(EncoderKind::Lstm);
    let a = train_supervised(&learner, &ds[0], &quick(2)).unwrap();
    let b = train_supervised(&learner, &ds[0], &quick(2)).unwrap();
    let c = train_supervised(&learner, &ds[0], &quick(3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn toy(n: usize) -> DomainDataset {
    let patients = (0..n)
        .map(|i| {
            let case = i % 2 == 0;
            PatientRecord {
                id: format!("t{i}"),
                domain: "toy".into(),
                label: if case { Label::Case } else { Label::Control },
                age: 70,
                visits: vec![vec![if case { 1 } else { 2 }; 1 + i % 3], vec![3]],
            }
        })
        .collect();
    DomainDataset::new("toy", patients)
}

#[test]
fn logistic_model_separates_a_separable_toy_set() {
    let data = toy(40);
    let learner = SequenceLearner::new(Architecture {
        encoder: EncoderKind::Logistic,
        vocab: 5,
        ..Architecture::default()
    });
    let cfg = TrainConfig {
        epochs: 60,
        lr: 0.05,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let p = train_supervised(&learner, &data, &cfg).unwrap();
    let batch = data.split_batch(SplitTag::Train, 8).unwrap();
    let probs = predict(&learner.arch, &p, &batch).unwrap();
    for (prob, label) in probs.iter().zip(&batch.labels) {
        assert_eq!(*prob >= 0.5, label.is_case());
    }
}

#[test]
fn one_neighbour_on_its_own_training_set_is_exact() {
    let ds = small_domains(10);
    let d = &ds[0];
    let knn = Knn::fit(d, 1017, 1).unwrap();
    let mut distinct = 0;
    for &i in &d.train {
        let p = &d.patients[i];
        // duplicate count vectors with different labels cannot both be recovered
        let clash = d.train.iter().any(|&j| {
            j != i && d.patients[j].label != p.label && d.patients[j].code_counts(1017) == p.code_counts(1017)
        });
        if !clash {
            distinct += 1;
            assert_eq!(knn.predict(p) >= 0.5, p.label.is_case());
        }
    }
    assert!(distinct > d.train.len() / 2);
}

#[test]
fn single_class_training_data_is_an_error() {
    let learner = small_learner(EncoderKind::Cnn);
    let mut data = toy(10);
    let cases: Vec<usize> = data.class_indices(SplitTag::Train, Label::Case);
    data = data.with_train(&cases).unwrap();
    assert!(matches!(
        fit(&learner, learner.init(0).unwrap(), &data, &cases, &quick(0), &[], None),
        Err(Error::SingleClass)
    ));
}

#[test]
fn zero_step_meta_test_scores_the_initialization() {
    let ds = small_domains(11);
    let learner = small_learner(EncoderKind::Cnn);
    let theta = train_supervised(&learner, &ds[1], &quick(11)).unwrap();
    let sources = [&ds[1], &ds[2]];
    let cfg = MetaTestConfig {
        alpha: 0.0,
        seed: 3,
        ..MetaTestConfig::default()
    };
    let adapted = meta_test(&learner, &theta, &sources, &ds[0], &cfg).unwrap();
    let direct = evaluate(&learner.arch, &theta, &ds[0]).unwrap();
    assert_eq!(adapted, direct);

    let moved = meta_test(
        &learner,
        &theta,
        &sources,
        &ds[0],
        &MetaTestConfig {
            alpha: 0.5,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_ne!(moved.probs, direct.probs);
    let again = meta_test(
        &learner,
        &theta,
        &sources,
        &ds[0],
        &MetaTestConfig { alpha: 0.5, ..cfg },
    )
    .unwrap();
    assert_eq!(moved, again);
}

#[test]
fn zero_parameters_give_identical_representations() {
    let ds = small_domains(12);
    let learner = small_learner(EncoderKind::Lstm);
    let zero = learner
        .init(0)
        .unwrap()
        .map_params(|_, t| Ok(Tensor::zeros(t.shape())))
        .unwrap();
    let patients: Vec<&PatientRecord> = ds[0].patients.iter().take(20).collect();
    let rows = export_representations(&learner.arch, &zero, &patients).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.features == rows[0].features));
    assert_eq!(rows[0].features.len(), learner.arch.repr_dim());
}
