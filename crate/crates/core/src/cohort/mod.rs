//! Cohort construction: code grouping, disease registry, windowed labeling,
//! age matching and a synthetic generator.

mod generate;
mod icd9;
pub mod io;
mod label;
mod matching;
mod registry;

pub use generate::{by_name, generate_cohort, AuditRecord, Cohort, CohortAudit, CohortSpec};
pub use icd9::{icd9_group, CodeUniverse};
pub use label::{label_patient, Diagnosis, Ineligible, Labeled, Window, WindowSpec, DAYS_PER_YEAR};
pub use matching::{age_match, Candidate};
pub use registry::{CodePattern, Disease, DiseaseRegistry};
