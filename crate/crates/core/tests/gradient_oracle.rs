//! Autodiff gradients of the prediction loss and of the meta-objective
//! against central finite differences on tiny sequence learners.

use std::time::{Duration, Instant};

use metapred::data::{Batch, Label, SplitTag};
use metapred::episodes::Episode;
use metapred::learner::{Learner, SequenceLearner};
use metapred::meta::{inner_adapt, meta_gradient, meta_objective, Order};
use metapred::model::{Architecture, EncoderKind, Mode};
use metapred_autodiff::oracle::{finite_difference, max_relative_error};
use metapred_autodiff::{gradient, with_precision, ParamSet, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn tiny(encoder: EncoderKind) -> Architecture {
    Architecture {
        encoder,
        vocab: 10,
        embed_dim: 4,
        filter_sizes: vec![2, 3],
        filters: 3,
        mlp_hidden: vec![5],
        max_len: 5,
        normalize: true,
    }
}

/// Four patients, up to five visits of one to three codes each.
fn random_batch(rng: &mut ChaCha8Rng, tag: &str) -> Batch {
    let mut visits = Vec::new();
    for _ in 0..4 {
        let t = rng.random_range(2..=5);
        visits.push(
            (0..t)
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| rng.random_range(1..10u32))
                        .collect()
                })
                .collect(),
        );
    }
    Batch {
        domain: tag.into(),
        split: SplitTag::Train,
        ids: (0..4).map(|i| format!("{tag}{i}")).collect(),
        visits,
        labels: vec![Label::Case, Label::Control, Label::Case, Label::Control],
    }
}

fn episode(rng: &mut ChaCha8Rng) -> Episode<Batch> {
    Episode {
        sources: vec![random_batch(rng, "s0"), random_batch(rng, "s1")],
        target: random_batch(rng, "t"),
    }
}

fn values(g: indexmap::IndexMap<String, metapred_autodiff::Expr>) -> indexmap::IndexMap<String, Tensor> {
    g.into_iter().map(|(k, e)| (k, e.value().clone())).collect()
}

fn check_loss_gradient(encoder: EncoderKind, seed: u64) -> f64 {
    with_precision(Precision::Double, || {
        let learner = SequenceLearner::new(tiny(encoder));
        let params = learner.init(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, "b");
        let vars = params.variables();
        let loss = learner.loss(&vars, &batch, Mode::Train).unwrap().loss;
        let analytic = values(gradient(&loss, &vars, false).unwrap());
        let numeric = finite_difference(
            |p| {
                learner
                    .loss(&p.constants(), &batch, Mode::Train)
                    .unwrap()
                    .loss
                    .value()
                    .item()
            },
            &params,
            EPS,
        )
        .unwrap();
        max_relative_error(&analytic, &numeric, FLOOR).unwrap()
    })
}

fn composed_objective(
    learner: &SequenceLearner,
    p: &ParamSet,
    ep: &Episode<Batch>,
    alpha: f64,
    mu: f64,
    k: usize,
) -> metapred::Result<f64> {
    let vars = p.variables();
    let adapted = inner_adapt(learner, &vars, &ep.sources, alpha, k, false)?;
    Ok(meta_objective(learner, &vars, &adapted.params, ep, mu)?
        .value()
        .item()?)
}

fn check_meta_gradient(encoder: EncoderKind, k: usize, mu: f64, seed: u64) -> f64 {
    with_precision(Precision::Double, || {
        let learner = SequenceLearner::new(tiny(encoder));
        let params = learner.init(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = episode(&mut rng);
        let alpha = 0.1;
        let mg = meta_gradient(&learner, &params, &ep, alpha, mu, k, Order::Second).unwrap();
        let numeric = finite_difference(
            |p| Ok(composed_objective(&learner, p, &ep, alpha, mu, k).unwrap()),
            &params,
            EPS,
        )
        .unwrap();
        max_relative_error(&mg.gradient, &numeric, FLOOR).unwrap()
    })
}

#[test]
fn loss_gradients_match_finite_differences() {
    let start = Instant::now();
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        for seed in 0..3 {
            let err = check_loss_gradient(encoder, seed);
            assert!(err < REL_TOL, "{encoder:?} seed {seed}: relative error {err:e}");
        }
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn meta_gradients_match_finite_differences_of_the_composed_objective() {
    let start = Instant::now();
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        for k in [1, 2] {
            for mu in [0.0, 0.5] {
                let err = check_meta_gradient(encoder, k, mu, 11);
                assert!(err < REL_TOL, "{encoder:?} k={k} mu={mu}: relative error {err:e}");
            }
        }
    }
    assert!(start.elapsed() < Duration::from_secs(120));
}

#[test]
fn first_order_drops_the_curvature_term() {
    with_precision(Precision::Double, || {
        let learner = SequenceLearner::new(tiny(EncoderKind::Lstm));
        let params = learner.init(3).unwrap();
        let ep = episode(&mut ChaCha8Rng::seed_from_u64(3));
        let second = meta_gradient(&learner, &params, &ep, 0.1, 0.5, 2, Order::Second).unwrap();
        let first = meta_gradient(&learner, &params, &ep, 0.1, 0.5, 2, Order::First).unwrap();
        assert_eq!(first.objective, second.objective);
        let diff = max_relative_error(&first.gradient, &second.gradient, FLOOR).unwrap();
        assert!(diff > 1e-6, "second-order term vanished");
    });
}
