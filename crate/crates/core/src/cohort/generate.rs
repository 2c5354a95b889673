//! Synthetic multi-domain cohorts.
//!
//! Every patient gets a raw diagnosis stream over a few years of history.
//! Visits arrive as a Poisson process whose rate gives `mean_visits` visits
//! per observation window; each visit holds a handful of codes drawn from a
//! Zipf-weighted background. For patients with the case phenotype, each code
//! is replaced with growing probability towards the end of the window by a
//! draw from the domain's signature
//!
//! ```text
//! s_d ∝ shared_strength · c + δ · u_d
//! ```
//!
//! where `c` lives on groups common to all domains and `u_d` on groups of
//! domain `d` only. Cases carry a qualifying diagnosis after the window;
//! controls carry none and get a random index date. Both classes receive
//! codes of other cognitive disorders. The streams then go through
//! [`label_patient`] and [`age_match`], so the records that come out are
//! exactly what the windowing rules extract.

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use super::icd9::CodeUniverse;
use super::label::{label_patient, Diagnosis, Labeled, Window, WindowSpec, DAYS_PER_YEAR};
use super::matching::{age_match, Candidate};
use super::registry::DiseaseRegistry;
use crate::data::{DomainDataset, Label, PatientRecord};
use crate::error::{Error, Result};

/// Background ranks below this are too common to carry signal.
const SIGNAL_RANK_MIN: usize = 30;
/// Background ranks at or above this are too rare to carry signal.
const SIGNAL_RANK_MAX: usize = 400;
/// Zipf exponent of the background code distribution.
const ZIPF_EXPONENT: f64 = 1.0;
/// Extra history beyond window and gap, in years, drawn uniformly.
const EXTRA_HISTORY_YEARS: f64 = 2.0;
/// Phenotype intensity at the start of the window (it reaches 1 at the end).
const RAMP_FLOOR: f64 = 0.2;
/// Attempts per requested patient before the spec is declared infeasible.
const MAX_ATTEMPTS: usize = 20;
const MIN_AGE: u32 = 55;
const MAX_AGE: u32 = 90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    /// Number of domains, taken in registry order.
    pub domains: usize,
    pub cases_per_domain: usize,
    pub controls_per_case: usize,
    /// Control candidates generated per control needed, before matching.
    pub control_pool_factor: f64,
    /// Mean visits per observation window.
    pub mean_visits: f64,
    /// Mean codes per visit.
    pub codes_per_visit: f64,
    pub shared_strength: f64,
    /// Weight of the domain-specific part of the signature.
    pub delta: f64,
    /// Probability that a code of a case-phenotype visit at full intensity
    /// comes from the signature.
    pub signal_rate: f64,
    /// Groups in the shared signature and in each domain's own part.
    pub signal_groups: usize,
    /// Probability of swapping a patient's phenotype.
    pub label_noise: f64,
    pub age_tolerance: u32,
    pub windows: WindowSpec,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            domains: 5,
            cases_per_domain: 400,
            controls_per_case: 1,
            control_pool_factor: 2.0,
            mean_visits: 20.0,
            codes_per_visit: 3.0,
            shared_strength: 1.0,
            delta: 0.5,
            signal_rate: 0.2,
            signal_groups: 20,
            label_noise: 0.05,
            age_tolerance: 5,
            windows: WindowSpec::default(),
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self, registry: &DiseaseRegistry) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.domains == 0 || self.domains > registry.diseases.len() {
            return bad(format!(
                "domains must be between 1 and {} (got {})",
                registry.diseases.len(),
                self.domains
            ));
        }
        if self.cases_per_domain == 0 || self.controls_per_case == 0 || self.signal_groups == 0 {
            return bad("counts must be positive".into());
        }
        if !(self.control_pool_factor >= 1.0) {
            return bad("control pool factor must be at least 1".into());
        }
        if !(self.mean_visits > 0.0 && self.codes_per_visit >= 1.0) {
            return bad("need positive visit rate and at least one code per visit".into());
        }
        if !(self.delta >= 0.0 && self.shared_strength >= 0.0) || self.delta + self.shared_strength <= 0.0 {
            return bad("signature weights must be non-negative and not both zero".into());
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return bad(format!("signal rate must lie in [0, 1] (got {})", self.signal_rate));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise must lie in [0, 0.5) (got {})", self.label_noise));
        }
        if !(self.windows.observation_years > 0.0 && self.windows.gap_years >= 0.0) {
            return bad("observation window must be positive and the gap non-negative".into());
        }
        let needed = (self.domains + 1) * self.signal_groups;
        if needed > SIGNAL_RANK_MAX - SIGNAL_RANK_MIN {
            return bad(format!(
                "{needed} signal groups do not fit in the moderately frequent band"
            ));
        }
        Ok(())
    }

    pub fn total_patients(&self) -> usize {
        self.domains * self.cases_per_domain * (1 + self.controls_per_case)
    }
}

/// What the generator knows about one emitted patient, for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub domain: String,
    pub label: Label,
    pub window: Window,
    /// Whether the patient's visits were drawn with the case phenotype.
    pub case_phenotype: bool,
    pub stream: Vec<Diagnosis>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortAudit {
    pub records: Vec<AuditRecord>,
}

impl CohortAudit {
    /// Patients with a diagnosis of their own domain's disease inside the
    /// observation window.
    pub fn window_leaks(&self, registry: &DiseaseRegistry) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for r in &self.records {
            let disease = registry.get(&r.domain)?;
            if r.stream
                .iter()
                .any(|d| r.window.contains(d.day) && disease.matches(&d.code))
            {
                out.push(r.id.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub vocab: usize,
    pub domains: Vec<DomainDataset>,
    pub audit: CohortAudit,
}

/// Shared generative structure: background weights and signatures.
struct World {
    universe: CodeUniverse,
    background: Vec<u32>,
    background_dist: WeightedIndex<f64>,
    signatures: Vec<(Vec<u32>, WeightedIndex<f64>)>,
}

impl World {
    fn new(spec: &CohortSpec, registry: &DiseaseRegistry, rng: &mut ChaCha8Rng) -> Result<World> {
        let universe = CodeUniverse::new();
        let reserved = registry.groups();
        let mut background: Vec<u32> = universe
            .groups()
            .iter()
            .filter(|g| !reserved.contains(g))
            .map(|g| universe.index_of_group(g).expect("group of the universe"))
            .collect();
        background.shuffle(rng);
        let weights: Vec<f64> = (0..background.len())
            .map(|r| (r as f64 + 1.0).powf(-ZIPF_EXPONENT))
            .collect();
        let background_dist = WeightedIndex::new(&weights).map_err(|e| Error::Infeasible(e.to_string()))?;

        let mut band: Vec<u32> = background[SIGNAL_RANK_MIN..SIGNAL_RANK_MAX].to_vec();
        band.shuffle(rng);
        let m = spec.signal_groups;
        let shared = &band[..m];
        let shared_w: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.0)).collect();
        let mut signatures = Vec::with_capacity(spec.domains);
        for d in 0..spec.domains {
            let own = &band[m * (d + 1)..m * (d + 2)];
            let mut groups = Vec::with_capacity(2 * m);
            let mut w = Vec::with_capacity(2 * m);
            for (&g, &c) in shared.iter().zip(&shared_w) {
                groups.push(g);
                w.push(spec.shared_strength * c);
            }
            for &g in own {
                groups.push(g);
                w.push(spec.delta * rng.random_range(0.5..1.0));
            }
            let dist = WeightedIndex::new(&w).map_err(|e| Error::Infeasible(e.to_string()))?;
            signatures.push((groups, dist));
        }
        Ok(World {
            universe,
            background,
            background_dist,
            signatures,
        })
    }

    fn raw_code(&self, index: u32, rng: &mut ChaCha8Rng) -> String {
        let group = self.universe.group_of_index(index).expect("valid index");
        format!("{group}.{}", rng.random_range(0..10))
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

struct Simulated {
    stream: Vec<Diagnosis>,
    index_day: Option<f64>,
    age: u32,
    case_phenotype: bool,
}

/// One raw record of domain `d`. `case` decides the qualifying diagnosis,
/// `phenotype` the visit content.
fn simulate(
    spec: &CohortSpec,
    world: &World,
    d: usize,
    case: bool,
    phenotype: bool,
    cognitive: &[String],
    qualifying: &[String],
    rng: &mut ChaCha8Rng,
) -> Simulated {
    let obs = spec.windows.observation_days();
    let gap = spec.windows.gap_days();
    let history = obs + gap + rng.random_range(0.0..=1.0) * EXTRA_HISTORY_YEARS * DAYS_PER_YEAR;
    let index = obs + gap + rng.random_range(0.0..=1.0) * (history - obs - gap);
    let (start, end) = (index - gap - obs, index - gap);

    let mut days: Vec<f64> = (0..poisson(spec.mean_visits * history / obs, rng))
        .map(|_| rng.random_range(0.0..history))
        .collect();
    days.push(0.0);
    days.sort_by(f64::total_cmp);
    days.dedup();

    let (sig_groups, sig_dist) = &world.signatures[d];
    let mut visits: Vec<(f64, Vec<String>)> = Vec::with_capacity(days.len() + 2);
    for &day in &days {
        let ramp = RAMP_FLOOR + (1.0 - RAMP_FLOOR) * ((day - start) / obs).clamp(0.0, 1.0);
        let n = 1 + poisson(spec.codes_per_visit - 1.0, rng);
        let codes = (0..n)
            .map(|_| {
                let g = if phenotype && rng.random_bool(spec.signal_rate * ramp) {
                    sig_groups[sig_dist.sample(rng)]
                } else {
                    world.background[world.background_dist.sample(rng)]
                };
                world.raw_code(g, rng)
            })
            .collect();
        visits.push((day, codes));
    }
    // other cognitive disorders, inside the window so controls qualify
    let in_window: Vec<usize> = (0..visits.len())
        .filter(|&i| visits[i].0 >= start && visits[i].0 <= end)
        .collect();
    if !in_window.is_empty() && !cognitive.is_empty() {
        for _ in 0..1 + usize::from(rng.random_bool(0.5)) {
            let v = in_window[rng.random_range(0..in_window.len())];
            let code = cognitive[rng.random_range(0..cognitive.len())].clone();
            visits[v].1.push(code);
        }
    }
    if case {
        let code = qualifying[rng.random_range(0..qualifying.len())].clone();
        visits.push((index, vec![code]));
        if rng.random_bool(0.5) {
            let code = qualifying[rng.random_range(0..qualifying.len())].clone();
            visits.push((index + rng.random_range(1.0..180.0), vec![code]));
        }
        visits.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let stream = visits
        .into_iter()
        .flat_map(|(day, codes)| codes.into_iter().map(move |code| Diagnosis { day, code }))
        .collect();
    Simulated {
        stream,
        index_day: (!case).then_some(index),
        age: rng.random_range(MIN_AGE..=MAX_AGE),
        case_phenotype: phenotype,
    }
}

/// Visits inside the window as sorted, deduplicated model indices.
fn window_visits(universe: &CodeUniverse, stream: &[Diagnosis], window: &Window) -> Result<Vec<Vec<u32>>> {
    let mut visits: Vec<(f64, Vec<u32>)> = Vec::new();
    for d in stream.iter().filter(|d| window.contains(d.day)) {
        let idx = universe.index_of_code(&d.code)?;
        match visits.last_mut() {
            Some((day, codes)) if *day == d.day => codes.push(idx),
            _ => visits.push((d.day, vec![idx])),
        }
    }
    Ok(visits
        .into_iter()
        .map(|(_, mut codes)| {
            codes.sort_unstable();
            codes.dedup();
            codes
        })
        .collect())
}

struct Labeled1 {
    sim: Simulated,
    label: Label,
    window: Window,
}

fn draw_eligible(
    spec: &CohortSpec,
    world: &World,
    registry: &DiseaseRegistry,
    key: &str,
    d: usize,
    case: bool,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Labeled1>> {
    let cognitive = registry.other_cognitive_codes(key)?;
    let qualifying = registry.get(key)?.codes();
    let want = if case { Label::Case } else { Label::Control };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * count {
            return Err(Error::Infeasible(format!(
                "only {} of {count} eligible {want:?} records for {key}",
                out.len()
            )));
        }
        let phenotype = case ^ rng.random_bool(spec.label_noise);
        let sim = simulate(spec, world, d, case, phenotype, &cognitive, &qualifying, rng);
        match label_patient(&sim.stream, registry, key, &spec.windows, sim.index_day)? {
            Labeled::Eligible { label, window } if label == want => out.push(Labeled1 { sim, label, window }),
            _ => {}
        }
    }
    Ok(out)
}

/// Generates `spec.domains` labeled domains, named by registry key.
pub fn generate_cohort(spec: &CohortSpec, registry: &DiseaseRegistry) -> Result<Cohort> {
    spec.validate(registry)?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, registry, &mut master)?;
    let domain_seeds: Vec<u64> = (0..spec.domains).map(|_| master.next_u64()).collect();
    let mut domains = Vec::with_capacity(spec.domains);
    let mut audit = CohortAudit::default();
    for (d, key) in registry.keys().take(spec.domains).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(domain_seeds[d]);
        let cases = draw_eligible(spec, &world, registry, key, d, true, spec.cases_per_domain, &mut rng)?;
        let pool_size =
            ((spec.cases_per_domain * spec.controls_per_case) as f64 * spec.control_pool_factor).ceil() as usize;
        let pool = draw_eligible(spec, &world, registry, key, d, false, pool_size, &mut rng)?;
        let cand = |v: &[Labeled1], tag: &str| -> Vec<Candidate> {
            v.iter()
                .enumerate()
                .map(|(i, p)| Candidate {
                    id: format!("{tag}{i}"),
                    age: p.sim.age,
                })
                .collect()
        };
        let kept = age_match(
            &cand(&cases, "case"),
            &cand(&pool, "control"),
            spec.age_tolerance,
            spec.controls_per_case,
            &mut rng,
        )?;
        let mut people: Vec<Labeled1> = cases;
        let mut pool: Vec<Option<Labeled1>> = pool.into_iter().map(Some).collect();
        people.extend(kept.into_iter().map(|j| pool[j].take().expect("kept once")));
        people.shuffle(&mut rng);

        let mut patients = Vec::with_capacity(people.len());
        for (i, p) in people.into_iter().enumerate() {
            let id = format!("{key}-{i:05}");
            patients.push(PatientRecord {
                id: id.clone(),
                domain: key.to_string(),
                label: p.label,
                age: p.sim.age,
                visits: window_visits(&world.universe, &p.sim.stream, &p.window)?,
            });
            audit.records.push(AuditRecord {
                id,
                domain: key.to_string(),
                label: p.label,
                window: p.window,
                case_phenotype: p.sim.case_phenotype,
                stream: p.sim.stream,
            });
        }
        domains.push(DomainDataset::new(key, patients));
    }
    Ok(Cohort {
        vocab: world.universe.vocab(),
        domains,
        audit,
    })
}

/// Domains by name, for callers that address them by role.
pub fn by_name(domains: &[DomainDataset]) -> IndexMap<&str, &DomainDataset> {
    domains.iter().map(|d| (d.name.as_str(), d)).collect()
}
