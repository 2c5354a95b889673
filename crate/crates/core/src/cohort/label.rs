//! Case/control labeling of a timestamped diagnosis stream with an
//! observation window and a prediction gap.

use serde::{Deserialize, Serialize};

use super::registry::DiseaseRegistry;
use crate::data::Label;
use crate::error::Result;

pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    /// Days since the start of the record.
    pub day: f64,
    pub code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub observation_years: f64,
    pub gap_years: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            observation_years: 2.0,
            gap_years: 0.5,
        }
    }
}

impl WindowSpec {
    pub fn observation_days(&self) -> f64 {
        self.observation_years * DAYS_PER_YEAR
    }

    pub fn gap_days(&self) -> f64 {
        self.gap_years * DAYS_PER_YEAR
    }
}

/// Observation window `[start, end]` in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn contains(&self, day: f64) -> bool {
        day >= self.start && day <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ineligible {
    /// The record does not reach back far enough for a full window.
    TooShort,
    /// No diagnosis falls inside the window.
    EmptyWindow,
    /// A qualifying diagnosis lies inside the prediction gap.
    QualifyingInGap,
    /// A qualifying diagnosis precedes the index date by more than the gap.
    PriorDiagnosis,
    /// Neither a qualifying diagnosis nor an index date.
    NoIndexDate,
    /// Controls must carry some other cognitive-disorder code.
    NoCognitiveCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Labeled {
    Eligible { label: Label, window: Window },
    NotEligible(Ineligible),
}

/// Labels one record for `disease`.
///
/// Without `index_day`, a record with a qualifying diagnosis is a case whose
/// window ends one gap before the first such diagnosis. With `index_day`
/// the window ends one gap before that date: a qualifying diagnosis after
/// it makes a case, one inside the gap or earlier makes the record
/// ineligible, and none makes a control. Controls need another cognitive
/// code somewhere in the record.
pub fn label_patient(
    stream: &[Diagnosis],
    registry: &DiseaseRegistry,
    disease: &str,
    windows: &WindowSpec,
    index_day: Option<f64>,
) -> Result<Labeled> {
    let target = registry.get(disease)?;
    let Some(record_start) = stream.iter().map(|d| d.day).reduce(f64::min) else {
        return Ok(Labeled::NotEligible(Ineligible::TooShort));
    };
    let first_qualifying = stream
        .iter()
        .filter(|d| target.matches(&d.code))
        .map(|d| d.day)
        .reduce(f64::min);
    let (obs, gap) = (windows.observation_days(), windows.gap_days());
    let (label, index) = match (index_day, first_qualifying) {
        (None, Some(q)) => (Label::Case, q),
        (None, None) => return Ok(Labeled::NotEligible(Ineligible::NoIndexDate)),
        (Some(i), Some(q)) if q > i => (Label::Case, i),
        (Some(i), Some(q)) if q > i - gap => return Ok(Labeled::NotEligible(Ineligible::QualifyingInGap)),
        (Some(_), Some(_)) => return Ok(Labeled::NotEligible(Ineligible::PriorDiagnosis)),
        (Some(i), None) => (Label::Control, i),
    };
    let window = Window {
        start: index - gap - obs,
        end: index - gap,
    };
    if window.start < record_start {
        return Ok(Labeled::NotEligible(Ineligible::TooShort));
    }
    if !stream.iter().any(|d| window.contains(d.day)) {
        return Ok(Labeled::NotEligible(Ineligible::EmptyWindow));
    }
    if label == Label::Control && !stream.iter().any(|d| registry.is_cognitive(&d.code)) {
        return Ok(Labeled::NotEligible(Ineligible::NoCognitiveCode));
    }
    Ok(Labeled::Eligible { label, window })
}
