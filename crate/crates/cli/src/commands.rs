//! Subcommands: argument parsing, dataset loading, the per-seed worker
//! pool and artifact writing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use metapred::cohort::io::{manifest_path, read_patients, write_patients, CohortManifest};
use metapred::cohort::{generate_cohort, DiseaseRegistry};
use metapred::data::DomainDataset;
use metapred::eval::write_representations_csv;
use metapred::metrics::{aggregate_runs, format_table, RunResult, RESULTS_HEADER};
use metapred_autodiff::ParamSet;
use serde::Serialize;

use crate::artifacts::{read_json, write_atomic, write_json, Layout, RunRecord};
use crate::experiment::{self, AblationRun, CurveSummary, SeedData};
use crate::manifest::{sha256_hex, BaselineMethod, ExperimentManifest};

#[derive(Debug, Parser)]
#[command(
    name = "metapred",
    version,
    about = "Meta-learned risk prediction experiments on multi-domain cohorts"
)]
pub struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Output directory; overrides the manifest's.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run this seed only instead of the manifest's list.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Seeds run in parallel.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort described by the manifest.
    Generate,
    /// Meta-train on the source domains with the simulated target.
    TrainMeta,
    /// Adapt the meta-learned model on sources and score the target.
    MetaTest,
    /// Fine-tune the meta-learned model over the resource sweep.
    Finetune,
    /// Train comparison methods over the resource sweep.
    TrainBaseline {
        /// Methods to run; defaults to the manifest's list.
        #[arg(long = "method", value_enum)]
        methods: Vec<BaselineMethod>,
    },
    /// Aggregate finished runs into one paired table.
    Compare,
    /// Learning curves with and without the source term.
    AblateMu,
    /// Meta-train on each source combination and fine-tune.
    SweepSources,
    /// Write penultimate-layer activations of test patients.
    ExportRepr,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainMeta => "train-meta",
            Command::MetaTest => "meta-test",
            Command::Finetune => "finetune",
            Command::TrainBaseline { .. } => "train-baseline",
            Command::Compare => "compare",
            Command::AblateMu => "ablate-mu",
            Command::SweepSources => "sweep-sources",
            Command::ExportRepr => "export-repr",
        }
    }
}

/// Everything a subcommand needs besides its own arguments.
pub struct Session {
    pub manifest: ExperimentManifest,
    pub manifest_hash: String,
    pub layout: Layout,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    command: &'static str,
}

impl Session {
    pub fn open(cli: &Cli) -> Result<Self> {
        let path = cli.manifest.as_deref().context("--manifest is required")?;
        let manifest = ExperimentManifest::load(path)?;
        let out = match (&cli.out, &manifest.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => path.parent().unwrap_or(Path::new(".")).join(o),
            (None, None) => bail!("no output directory: pass --out or set `out` in the manifest"),
        };
        ensure!(cli.jobs > 0, "--jobs must be positive");
        Ok(Session {
            manifest_hash: manifest.hash()?,
            seeds: cli.seed.map_or_else(|| manifest.seeds.clone(), |s| vec![s]),
            manifest,
            layout: Layout::new(out),
            jobs: cli.jobs,
            command: cli.command.name(),
        })
    }

    pub fn dataset_path(&self) -> PathBuf {
        let p = &self.manifest.dataset.path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.layout.root.join(p)
        }
    }

    /// Reads the dataset and returns its domains with the hash of its bytes.
    pub fn load_dataset(&self) -> Result<(Vec<DomainDataset>, String)> {
        let path = self.dataset_path();
        let bytes = std::fs::read(&path)
            .with_context(|| format!("dataset {} is missing; run `generate` first", path.display()))?;
        let domains = read_patients(&bytes[..]).with_context(|| format!("reading {}", path.display()))?;
        let side = manifest_path(&path);
        if side.exists() {
            let cm: CohortManifest = read_json(&side)?;
            ensure!(
                self.manifest.model.vocab >= cm.vocab,
                "model.vocab: {} is smaller than the dataset's vocabulary of {}",
                self.manifest.model.vocab,
                cm.vocab
            );
        }
        Ok((domains, sha256_hex(&bytes)))
    }

    fn record(
        &self,
        seed: u64,
        dataset_hash: &str,
        results: Vec<RunResult>,
        notes: BTreeMap<String, f64>,
    ) -> RunRecord {
        RunRecord {
            command: self.command.to_string(),
            seed,
            split_seed: self.manifest.split_seed(seed, 0),
            dataset_hash: dataset_hash.to_string(),
            manifest_hash: self.manifest_hash.clone(),
            results,
            notes,
        }
    }

    fn copy_manifest(&self) -> Result<()> {
        write_atomic(&self.layout.manifest(), self.manifest.to_toml()?.as_bytes())
    }

    fn load_params(&self, seed: u64) -> Result<ParamSet> {
        let path = self.layout.meta_params(seed);
        ensure!(path.exists(), "{} is missing; run `train-meta` first", path.display());
        let params: ParamSet = read_json(&path)?;
        let want = self.manifest.model.tag();
        ensure!(
            params.arch == want,
            "{} holds a {} model but the manifest describes {want}",
            path.display(),
            params.arch
        );
        Ok(params)
    }

    /// Runs `f` for every seed on up to `jobs` threads; results come back in
    /// seed order and the first failure is reported.
    pub fn per_seed<T: Send>(&self, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..self.seeds.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..self.jobs.min(self.seeds.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&seed) = self.seeds.get(i) else { break };
                    let r = f(seed).with_context(|| format!("seed {seed}"));
                    slots.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .map(|s| s.expect("every seed ran"))
            .collect()
    }

    fn seed_data(&self, domains: &[DomainDataset], seed: u64) -> Result<SeedData> {
        SeedData::new(&self.manifest, domains, seed)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let s = Session::open(cli)?;
    s.copy_manifest()?;
    match &cli.command {
        Command::Generate => generate(&s),
        Command::TrainMeta => train_meta(&s),
        Command::MetaTest => meta_test(&s),
        Command::Finetune => finetune(&s),
        Command::TrainBaseline { methods } => train_baseline(&s, methods),
        Command::Compare => compare(&s),
        Command::AblateMu => ablate_mu(&s),
        Command::SweepSources => sweep_sources(&s),
        Command::ExportRepr => export_repr(&s),
    }
}

fn generate(s: &Session) -> Result<()> {
    let registry = DiseaseRegistry::standard();
    let spec = &s.manifest.dataset.spec;
    let cohort = generate_cohort(spec, &registry).context("dataset.spec")?;
    let leaks = cohort.audit.window_leaks(&registry)?;
    ensure!(
        leaks.is_empty(),
        "generated patients with outcome codes inside their windows: {leaks:?}"
    );
    if s.manifest.model.vocab < cohort.vocab {
        warn!(
            "model.vocab {} is smaller than the generated vocabulary {}",
            s.manifest.model.vocab, cohort.vocab
        );
    }
    let mut bytes = Vec::new();
    write_patients(&cohort.domains, &mut bytes)?;
    let path = s.dataset_path();
    write_atomic(&path, &bytes)?;
    write_json(
        &manifest_path(&path),
        &CohortManifest {
            domains: cohort.domains.iter().map(|d| d.name.clone()).collect(),
            vocab: cohort.vocab,
            spec: spec.clone(),
            seed: spec.seed,
        },
    )?;
    for d in &cohort.domains {
        println!(
            "{}: {} patients, {:.1} visits on average",
            d.name,
            d.patients.len(),
            d.mean_visits()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn train_meta(s: &Session) -> Result<()> {
    let (domains, hash) = s.load_dataset()?;
    s.per_seed(|seed| {
        let data = s.seed_data(&domains, seed)?;
        let (theta, history) = experiment::train_meta(&s.manifest, &data)?;
        let mut jsonl = Vec::new();
        history.write_jsonl(&mut jsonl)?;
        write_atomic(&s.layout.meta_history(seed), &jsonl)?;
        write_json(&s.layout.meta_params(seed), &theta)?;
        let mut notes = BTreeMap::new();
        if let Some(last) = history.records.last() {
            notes.insert("final_combined_loss".to_string(), last.combined);
        }
        if let Some((auroc, f1)) = history.last_eval() {
            notes.insert("simulated_target_auroc".to_string(), auroc);
            notes.insert("simulated_target_f1".to_string(), f1);
        }
        write_json(&s.layout.meta_run(seed), &s.record(seed, &hash, Vec::new(), notes))?;
        println!(
            "seed {seed}: {} iterations -> {}",
            history.len(),
            s.layout.meta_params(seed).display()
        );
        Ok(())
    })?;
    Ok(())
}

fn meta_test(s: &Session) -> Result<()> {
    let (domains, hash) = s.load_dataset()?;
    s.per_seed(|seed| {
        let theta = s.load_params(seed)?;
        let data = s.seed_data(&domains, seed)?;
        let r = experiment::run_meta_test(&s.manifest, &data, &theta)?;
        println!("seed {seed}: {} auroc {:.4} f1 {:.4}", r.target, r.auroc, r.f1);
        write_json(
            &s.layout.meta_test(seed),
            &s.record(seed, &hash, vec![r], BTreeMap::new()),
        )
    })?;
    Ok(())
}

fn finetune(s: &Session) -> Result<()> {
    let (domains, hash) = s.load_dataset()?;
    s.per_seed(|seed| {
        let theta = s.load_params(seed)?;
        let data = s.seed_data(&domains, seed)?;
        let results = experiment::run_finetune(&s.manifest, &data, &theta)?;
        print_results(&results);
        write_json(
            &s.layout.finetune(seed),
            &s.record(seed, &hash, results, BTreeMap::new()),
        )
    })?;
    Ok(())
}

fn train_baseline(s: &Session, methods: &[BaselineMethod]) -> Result<()> {
    let methods = if methods.is_empty() {
        &s.manifest.baselines.methods[..]
    } else {
        methods
    };
    ensure!(!methods.is_empty(), "baselines.methods: no method selected");
    let (domains, hash) = s.load_dataset()?;
    s.per_seed(|seed| {
        let data = s.seed_data(&domains, seed)?;
        for &m in methods {
            let run = experiment::run_baseline(&s.manifest, &data, m).with_context(|| m.tag().to_string())?;
            print_results(&run.results);
            write_json(
                &s.layout.baseline(m.tag(), seed),
                &s.record(seed, &hash, run.results, run.notes),
            )?;
        }
        Ok(())
    })?;
    Ok(())
}

fn print_results(results: &[RunResult]) {
    for r in results {
        println!(
            "seed {} {} rho {}: auroc {:.4} f1 {:.4}",
            r.seed, r.method, r.rho, r.auroc, r.f1
        );
    }
}

/// Runs admitted into a paired comparison: records computed on this
/// dataset with this manifest's split seeds, restricted to seeds every
/// method has.
pub fn paired_results(s: &Session, records: &[(PathBuf, RunRecord)], dataset_hash: &str) -> Vec<RunResult> {
    let mut admitted: Vec<&RunRecord> = Vec::new();
    for (path, r) in records {
        if r.dataset_hash != dataset_hash {
            warn!("skipping {}: computed on a different dataset", path.display());
        } else if r.split_seed != s.manifest.split_seed(r.seed, 0) {
            warn!(
                "skipping {}: split seed {} differs from this manifest's",
                path.display(),
                r.split_seed
            );
        } else if !s.seeds.contains(&r.seed) {
            info!("skipping {}: seed {} is not selected", path.display(), r.seed);
        } else {
            admitted.push(r);
        }
    }
    let results: Vec<&RunResult> = admitted.iter().flat_map(|r| &r.results).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in &results {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let has = |m: &str, seed: u64| results.iter().any(|r| r.method == m && r.seed == seed);
    let shared: Vec<u64> = s
        .seeds
        .iter()
        .copied()
        .filter(|&seed| methods.iter().all(|m| has(m, seed)))
        .collect();
    for &seed in &s.seeds {
        if !shared.contains(&seed) && methods.iter().any(|m| has(m, seed)) {
            warn!("leaving out seed {seed}: not every method has a run for it");
        }
    }
    results
        .into_iter()
        .filter(|r| shared.contains(&r.seed))
        .cloned()
        .collect()
}

fn compare(s: &Session) -> Result<()> {
    let (_, hash) = s.load_dataset()?;
    let records = s
        .layout
        .run_records()?
        .into_iter()
        .map(|p| read_json::<RunRecord>(&p).map(|r| (p, r)))
        .collect::<Result<Vec<_>>>()?;
    let results = paired_results(s, &records, &hash);
    ensure!(!results.is_empty(), "no paired runs under {}", s.layout.root.display());

    let mut csv = format!("{RESULTS_HEADER}\n");
    for r in &results {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_atomic(&s.layout.results_csv(), csv.as_bytes())?;

    let rows = aggregate_runs(&results)?;
    let std = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut table = String::from("method,target,rho,n,auroc_mean,auroc_std,f1_mean,f1_std\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.target,
            r.rho,
            r.auroc.n,
            r.auroc.mean,
            std(r.auroc.std),
            r.f1.mean,
            std(r.f1.std)
        ));
    }
    write_atomic(&s.layout.compare_csv(), table.as_bytes())?;
    let text = format_table(&rows);
    write_atomic(&s.layout.compare_txt(), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationSummary {
    dataset_hash: String,
    manifest_hash: String,
    runs: Vec<SeedCurves>,
    mean_final_auroc: [Option<f64>; 2],
}

#[derive(Debug, Serialize)]
struct SeedCurves {
    seed: u64,
    split_seed: u64,
    metapred: CurveSummary,
    maml: CurveSummary,
}

/// One row per iteration of each curve: `curve` is `metapred` or `maml`.
pub const CURVES_HEADER: &str = "curve,mu,seed,iteration,source_loss,target_loss,combined,eval_auroc,eval_f1";

fn ablate_mu(s: &Session) -> Result<()> {
    if s.manifest.meta.mu == 0.0 {
        warn!("meta.mu is 0, so both curves train the same objective");
    }
    let (domains, hash) = s.load_dataset()?;
    let runs: Vec<AblationRun> =
        s.per_seed(|seed| experiment::run_ablation(&s.manifest, &s.seed_data(&domains, seed)?))?;

    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = format!("{CURVES_HEADER}\n");
    for run in &runs {
        for (curve, mu, h) in [
            ("metapred", s.manifest.meta.mu, &run.metapred),
            ("maml", 0.0, &run.maml),
        ] {
            for r in &h.records {
                csv.push_str(&format!(
                    "{curve},{mu},{},{},{},{},{},{},{}\n",
                    run.seed,
                    r.iteration,
                    r.source_loss,
                    r.target_loss,
                    r.combined,
                    opt(r.eval_auroc),
                    opt(r.eval_f1)
                ));
            }
        }
    }
    write_atomic(&s.layout.ablation_curves(), csv.as_bytes())?;

    let per_seed: Vec<SeedCurves> = runs
        .iter()
        .map(|run| {
            let [metapred, maml] = run.summaries(&s.manifest);
            SeedCurves {
                seed: run.seed,
                split_seed: s.manifest.split_seed(run.seed, 0),
                metapred,
                maml,
            }
        })
        .collect();
    let mean = |pick: fn(&SeedCurves) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = per_seed.iter().map(pick).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = AblationSummary {
        dataset_hash: hash,
        manifest_hash: s.manifest_hash.clone(),
        mean_final_auroc: [mean(|c| c.metapred.final_auroc), mean(|c| c.maml.final_auroc)],
        runs: per_seed,
    };
    write_json(&s.layout.ablation_summary(), &summary)?;
    for c in &summary.runs {
        println!(
            "seed {}: final auroc metapred {} maml {}",
            c.seed,
            opt(c.metapred.final_auroc),
            opt(c.maml.final_auroc)
        );
    }
    Ok(())
}

fn sweep_sources(s: &Session) -> Result<()> {
    let (domains, hash) = s.load_dataset()?;
    s.per_seed(|seed| {
        let data = s.seed_data(&domains, seed)?;
        let results = experiment::run_source_sweep(&s.manifest, &data)?;
        print_results(&results);
        write_json(
            &s.layout.source_sweep(seed),
            &s.record(seed, &hash, results, BTreeMap::new()),
        )
    })?;
    Ok(())
}

fn export_repr(s: &Session) -> Result<()> {
    let (domains, _) = s.load_dataset()?;
    s.per_seed(|seed| {
        let theta = s.load_params(seed)?;
        let data = s.seed_data(&domains, seed)?;
        let rows = experiment::representations(&s.manifest, &data, &theta)?;
        let mut csv = Vec::new();
        write_representations_csv(&rows, &mut csv)?;
        write_atomic(&s.layout.representations(seed), &csv)?;
        println!(
            "seed {seed}: {} patients -> {}",
            rows.len(),
            s.layout.representations(seed).display()
        );
        Ok(())
    })?;
    Ok(())
}
