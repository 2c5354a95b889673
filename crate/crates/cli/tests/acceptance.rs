//! Acceptance suite: one test that checks every acceptance criterion and
//! prints a PASS or FAIL line for each before asserting they all passed.
//!
//! Criteria 6 to 8 run the shipped study manifests on one freshly generated
//! cohort per seed (cohort seed = run seed); they take several minutes.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use metapred::adam::{Adam, AdamConfig};
use metapred::cohort::{generate_cohort, CohortSpec, DiseaseRegistry};
use metapred::data::{Batch, DomainDataset, Label, SplitTag};
use metapred::episodes::{split_train_test, Episode, EpisodeSampler};
use metapred::eval::{fine_tune, FineTuneConfig};
use metapred::learner::{Learner, ScalarQuadratic, SequenceLearner};
use metapred::meta::{inner_adapt, meta_gradient, meta_objective, meta_train_step, MetaConfig, Order};
use metapred::metrics::{auroc, f1, RunResult};
use metapred::model::{Architecture, EncoderKind, Mode};
use metapred_autodiff::oracle::{finite_difference, max_relative_error};
use metapred_autodiff::{gradient, with_precision, ParamSet, Precision, Tensor};
use metapred_cli::experiment::{self, SeedData};
use metapred_cli::manifest::BaselineMethod;
use metapred_cli::ExperimentManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// ---------------------------------------------------------------- 1 and 2

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

/// Four patients of two to five visits over a ten-code vocabulary.
fn random_batch(rng: &mut ChaCha8Rng, tag: &str) -> Batch {
    let visits = (0..4)
        .map(|_| {
            (0..rng.random_range(2..=5))
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| rng.random_range(1..10u32))
                        .collect()
                })
                .collect()
        })
        .collect();
    Batch {
        domain: tag.into(),
        split: SplitTag::Train,
        ids: (0..4).map(|i| format!("{tag}{i}")).collect(),
        visits,
        labels: vec![Label::Case, Label::Control, Label::Case, Label::Control],
    }
}

fn loss_gradient_error(encoder: EncoderKind, seed: u64) -> f64 {
    with_precision(Precision::Double, || {
        let learner = SequenceLearner::new(tiny(encoder));
        let params = learner.init(seed).unwrap();
        let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), "b");
        let vars = params.variables();
        let loss = learner.loss(&vars, &batch, Mode::Train).unwrap().loss;
        let analytic: IndexMap<String, Tensor> = gradient(&loss, &vars, false)
            .unwrap()
            .into_iter()
            .map(|(k, e)| (k, e.value().clone()))
            .collect();
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
            1e-5,
        )
        .unwrap();
        max_relative_error(&analytic, &numeric, 1e-6).unwrap()
    })
}

fn criterion_1() -> String {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        for seed in 0..3 {
            let err = loss_gradient_error(encoder, seed);
            assert!(err < 1e-3, "{encoder:?} seed {seed}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    let took = start.elapsed();
    assert!(took < Duration::from_secs(60), "took {took:?}");
    format!("worst relative error {worst:.1e} over CNN and LSTM, {took:.1?}")
}

fn meta_gradient_error(encoder: EncoderKind, k: usize, mu: f64) -> f64 {
    with_precision(Precision::Double, || {
        let learner = SequenceLearner::new(tiny(encoder));
        let params = learner.init(11).unwrap();
        let rng = &mut ChaCha8Rng::seed_from_u64(11);
        let ep = Episode {
            sources: vec![random_batch(rng, "s0"), random_batch(rng, "s1")],
            target: random_batch(rng, "t"),
        };
        let alpha = 0.1;
        let mg = meta_gradient(&learner, &params, &ep, alpha, mu, k, Order::Second).unwrap();
        let composed = |p: &ParamSet| {
            let vars = p.variables();
            let adapted = inner_adapt(&learner, &vars, &ep.sources, alpha, k, false).unwrap();
            meta_objective(&learner, &vars, &adapted.params, &ep, mu)
                .unwrap()
                .value()
                .item()
        };
        let numeric = finite_difference(composed, &params, 1e-5).unwrap();
        max_relative_error(&mg.gradient, &numeric, 1e-6).unwrap()
    })
}

fn scalar_meta_gradient(theta: f64, a: f64, b: f64, alpha: f64, mu: f64, k: usize) -> f64 {
    let ep = Episode {
        sources: vec![a],
        target: b,
    };
    with_precision(Precision::Double, || {
        let g = meta_gradient(
            &ScalarQuadratic,
            &ScalarQuadratic::params(theta),
            &ep,
            alpha,
            mu,
            k,
            Order::Second,
        );
        g.unwrap().gradient[ScalarQuadratic::PARAM].item().unwrap()
    })
}

fn criterion_2() -> String {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        for k in [1, 2] {
            for mu in [0.0, 0.5] {
                let err = meta_gradient_error(encoder, k, mu);
                assert!(err < 1e-3, "{encoder:?} k={k} mu={mu}: relative error {err:e}");
                worst = worst.max(err);
            }
        }
    }
    let took = start.elapsed();
    assert!(took < Duration::from_secs(120), "took {took:?}");
    // b·θ·(1 − αa)² + μ·a·θ = 2·0.81 + 0.5·2
    let g = scalar_meta_gradient(2.0, 1.0, 1.0, 0.1, 0.5, 1);
    assert!((g - 2.62).abs() <= 1e-10, "scalar reference {g}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (theta, a, b): (f64, f64, f64) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.1..2.0),
        );
        let (alpha, mu, k): (f64, f64, usize) = (
            rng.random_range(0.0..0.2),
            rng.random_range(0.0..1.0),
            rng.random_range(1..4),
        );
        let want = b * theta * (1.0 - alpha * a).powi(2 * k as i32) + mu * a * theta;
        let got = scalar_meta_gradient(theta, a, b, alpha, mu, k);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
    format!("worst relative error {worst:.1e}; scalar reference {g:.12}; {took:.1?}")
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> String {
    let config = MetaConfig {
        alpha: 0.15,
        beta: 0.05,
        mu: 0.0,
        k: 1,
        precision: Precision::Double,
        ..MetaConfig::default()
    };
    // straight-line MAML: adapt, chain rule through the step, Adam
    let (mut theta_ref, mut m, mut v) = (1.7f64, 0.0f64, 0.0f64);
    let mut theta = ScalarQuadratic::params(1.7);
    let mut adam = Adam::new(config.beta, AdamConfig::default());
    let mut worst = 0.0f64;
    with_precision(Precision::Double, || {
        for step in 1..=40 {
            let x = step as f64;
            let tasks = [
                (0.5 + (x * 0.37).sin().abs(), 1.0 + 0.5 * (x * 0.11).cos()),
                (1.3, 0.4 + 0.01 * x),
            ];
            let episodes: Vec<Episode<f64>> = tasks
                .iter()
                .map(|&(a, b)| Episode {
                    sources: vec![a],
                    target: b,
                })
                .collect();
            theta = meta_train_step(&ScalarQuadratic, &theta, &episodes, &config, &mut adam)
                .unwrap()
                .0;

            let g = tasks
                .iter()
                .map(|&(a, b)| b * (theta_ref - config.alpha * a * theta_ref) * (1.0 - config.alpha * a))
                .sum::<f64>()
                / tasks.len() as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(step));
            let v_hat = v / (1.0 - 0.999f64.powi(step));
            theta_ref -= config.beta * m_hat / (v_hat.sqrt() + 1e-8);

            let ours = theta.get(ScalarQuadratic::PARAM).unwrap().item().unwrap();
            let gap = (ours - theta_ref).abs();
            assert!(gap <= 1e-10, "step {step}: {ours} vs {theta_ref}");
            worst = worst.max(gap);
        }
    });
    format!("40 updates, largest gap {worst:.1e}")
}

// ---------------------------------------------------------------- 4

fn small_domains(cases: usize, domains: usize, seed: u64) -> Vec<DomainDataset> {
    let spec = CohortSpec {
        domains,
        cases_per_domain: cases,
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

fn criterion_4() -> String {
    let target = &small_domains(60, 1, 4)[0];
    let mut checked = Vec::new();
    for encoder in [EncoderKind::Cnn, EncoderKind::Lstm] {
        let learner = SequenceLearner::new(Architecture {
            encoder,
            embed_dim: 8,
            filters: 4,
            mlp_hidden: vec![8],
            max_len: 16,
            ..Architecture::default()
        });
        let theta = learner.init(1).unwrap();
        let tuned = fine_tune(
            &learner,
            &theta,
            target,
            &FineTuneConfig {
                rho: 0.5,
                epochs: 3,
                ..FineTuneConfig::default()
            },
        )
        .unwrap();
        let frozen = learner.arch.default_frozen(&theta);
        assert!(!frozen.is_empty());
        for (name, t) in theta.iter() {
            let after = tuned.get(name).unwrap();
            if frozen.iter().any(|f| f == name) {
                assert!(after == t, "{encoder:?}: frozen {name} changed");
            } else {
                assert!(
                    learner.arch.is_head(name),
                    "{encoder:?}: {name} trainable but not in the head"
                );
                assert!(after != t, "{encoder:?}: head tensor {name} did not move");
            }
        }
        checked.push(format!(
            "{encoder:?} {} frozen/{} head",
            frozen.len(),
            theta.len() - frozen.len()
        ));
    }
    checked.join(", ")
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> String {
    let registry = DiseaseRegistry::standard();
    let spec = CohortSpec {
        cases_per_domain: 1000,
        seed: 17,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec, &registry).unwrap();
    assert_eq!(cohort.audit.records.len(), 10_000);
    let mut inside = 0;
    for r in &cohort.audit.records {
        let disease = registry.get(&r.domain).unwrap();
        inside += r
            .stream
            .iter()
            .filter(|dx| dx.day >= r.window.start && dx.day <= r.window.end && disease.matches(&dx.code))
            .count();
    }
    assert_eq!(inside, 0, "qualifying diagnoses inside observation windows");

    let ds = small_domains(60, 4, 31);
    let (genuine, simulated, sources) = (&ds[0], &ds[1], vec![&ds[2], &ds[3]]);
    let mut forbidden: HashSet<&str> = genuine.patients.iter().map(|p| p.id.as_str()).collect();
    for d in &ds[1..] {
        forbidden.extend(d.test.iter().map(|&i| d.patients[i].id.as_str()));
    }
    let mut sampler = EpisodeSampler::new(sources, simulated, 16, 32, 5).unwrap();
    let mut seen = 0usize;
    for _ in 0..1000 {
        let ep = sampler.sample().unwrap();
        for batch in ep.sources.iter().chain([&ep.target]) {
            assert_eq!(batch.split, SplitTag::Train);
            for id in &batch.ids {
                assert!(!forbidden.contains(id.as_str()), "{id} reached an episode");
                seen += 1;
            }
        }
    }
    format!("10000 patients without window leaks; {seen} episode slots without test or target patients")
}

// ---------------------------------------------------------------- 6 to 8

fn shipped(name: &str) -> ExperimentManifest {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests").join(name);
    ExperimentManifest::load(&path).unwrap()
}

/// The study's cohort for one run seed, split by the manifest's rule.
fn seed_data(manifest: &ExperimentManifest, seed: u64) -> SeedData {
    let spec = CohortSpec {
        seed,
        ..manifest.dataset.spec.clone()
    };
    let cohort = generate_cohort(&spec, &DiseaseRegistry::standard()).unwrap();
    SeedData::new(manifest, &cohort.domains, seed).unwrap()
}

/// MetaPred fine-tuned over the ρ sweep next to the three neural baselines.
fn low_resource_study() -> Vec<RunResult> {
    let m = shipped("synthetic.toml");
    assert_eq!(m.dataset.spec.cases_per_domain * 2, 800, "800 patients per domain");
    assert_eq!((m.dataset.spec.delta, m.dataset.spec.label_noise), (0.5, 0.05));
    let mut out = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let data = seed_data(&m, seed);
        let (theta, _) = experiment::train_meta(&m, &data).unwrap();
        out.extend(experiment::run_finetune(&m, &data, &theta).unwrap());
        for b in [
            BaselineMethod::Supervised,
            BaselineMethod::TransLearn,
            BaselineMethod::MultiLearn,
        ] {
            out.extend(experiment::run_baseline(&m, &data, b).unwrap().results);
        }
        eprintln!("low-resource study, seed {seed}: {:.1?}", start.elapsed());
    }
    out
}

fn mean_of(results: &[RunResult], method: &str, rho: f64, pick: fn(&RunResult) -> f64) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.method == method && r.rho == rho)
        .map(pick)
        .collect();
    assert_eq!(v.len(), SEEDS.len(), "{method} at rho {rho}");
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(study: &[RunResult]) -> String {
    let meta = mean_of(study, "metapred", 0.2, |r| r.auroc);
    let sup = mean_of(study, "supervised", 0.2, |r| r.auroc);
    assert!(
        meta >= sup + 0.05,
        "mean AUROC at rho 0.2: metapred {meta:.4}, supervised {sup:.4}"
    );
    format!(
        "mean AUROC at rho 0.2: metapred {meta:.4} vs supervised {sup:.4} (margin {:.4})",
        meta - sup
    )
}

fn criterion_7(study: &[RunResult]) -> String {
    let mut lines = Vec::new();
    for rho in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let meta = mean_of(study, "metapred", rho, |r| r.f1);
        let tl = mean_of(study, "translearn", rho, |r| r.f1);
        let ml = mean_of(study, "multilearn", rho, |r| r.f1);
        assert!(
            meta >= tl - 0.02 && meta >= ml - 0.02,
            "mean F1 at rho {rho}: metapred {meta:.4}, translearn {tl:.4}, multilearn {ml:.4}"
        );
        lines.push(format!("rho {rho}: {meta:.3}/{tl:.3}/{ml:.3}"));
    }
    format!("mean F1 metapred/translearn/multilearn: {}", lines.join("; "))
}

fn criterion_8() -> String {
    let m = shipped("ablation.toml");
    assert_eq!(m.dataset.spec.delta, 1.0);
    assert!(m.meta.mu == 0.5);
    let (mut meta, mut maml, mut worst_plateau) = (Vec::new(), Vec::new(), 0.0f64);
    for seed in SEEDS {
        let run = experiment::run_ablation(&m, &seed_data(&m, seed)).unwrap();
        for (curve, s) in ["metapred", "maml"].iter().zip(run.summaries(&m)) {
            let ratio = s.plateau_ratio.expect("history longer than the plateau window");
            assert!(
                ratio < 0.1,
                "seed {seed} {curve}: tail variance is {ratio:.3} of the initial loss"
            );
            worst_plateau = worst_plateau.max(ratio);
        }
        meta.push(run.metapred.last_eval().unwrap().0);
        maml.push(run.maml.last_eval().unwrap().0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&meta), mean(&maml));
    assert!(
        a >= b,
        "final simulated-target AUROC: metapred {a:.4} < maml {b:.4} (per seed {meta:?} vs {maml:?})"
    );
    format!(
        "mean final simulated-target AUROC {a:.4} (mu 0.5) vs {b:.4} (mu 0); largest plateau ratio {worst_plateau:.3}"
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.random_range(2..120);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=20u32) as f64 / 20.0).collect();
        let mut labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Label::Case
                } else {
                    Label::Control
                }
            })
            .collect();
        labels[0] = Label::Case;
        labels[1] = Label::Control;

        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i].is_case()) {
            for j in (0..n).filter(|&j| !labels[j].is_case()) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert_eq!(auroc(&scores, &labels).unwrap(), wins / pairs);

        let count = |pred: bool, case: bool| {
            scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| (**s >= 0.5) == pred && l.is_case() == case)
                .count()
        };
        let (tp, fp, fneg) = (count(true, true), count(true, false), count(false, true));
        let want = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        };
        assert_eq!(f1(&scores, &labels).unwrap(), want);
    }
    "1000 random instances, AUROC and F1 exact".to_string()
}

// ---------------------------------------------------------------- 10

fn every_file(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> String {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("manifests")
        .join("smoke.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let commands = [
        "generate",
        "train-meta",
        "meta-test",
        "finetune",
        "train-baseline",
        "ablate-mu",
        "sweep-sources",
        "export-repr",
        "compare",
    ];
    for (dir, jobs) in dirs.iter().zip(["1", "2"]) {
        for c in commands {
            let o = Command::new(env!("CARGO_BIN_EXE_metapred"))
                .arg("--manifest")
                .arg(&manifest)
                .arg("--out")
                .arg(dir.path())
                .args(["--jobs", jobs, c])
                .output()
                .unwrap();
            assert!(o.status.success(), "{c}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let files = every_file(dirs[0].path());
    assert_eq!(files, every_file(dirs[1].path()), "different file sets");
    for f in &files {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{} differs between reruns", f.display());
    }
    format!("{} files identical across two runs of every subcommand", files.len())
}

// ----------------------------------------------------------------

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".to_string())
}

#[test]
fn acceptance() {
    let study = catch_unwind(low_resource_study).map_err(panic_message);
    let with_study = |f: fn(&[RunResult]) -> String| {
        let s = study.clone();
        move || match &s {
            Ok(s) => f(s),
            Err(e) => panic!("study failed: {e}"),
        }
    };
    let criteria: Vec<(u32, Box<dyn Fn() -> String>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(criterion_2)),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(with_study(criterion_6))),
        (7, Box::new(with_study(criterion_7))),
        (8, Box::new(criterion_8)),
        (9, Box::new(criterion_9)),
        (10, Box::new(criterion_10)),
    ];
    let mut failed = Vec::new();
    let mut report = Vec::new();
    for (n, check) in &criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => report.push(format!("PASS criterion {n}: {detail}")),
            Err(e) => {
                report.push(format!("FAIL criterion {n}: {}", panic_message(e)));
                failed.push(*n);
            }
        }
    }
    for line in &report {
        println!("{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
