//! Diagnosis-code patterns that define each disease.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::icd9::{icd9_group, CodeUniverse};
use crate::error::{Error, Result};

/// An exact code (`331.83`) or a whole group (`332.*`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CodePattern {
    Exact(String),
    Group(String),
}

impl CodePattern {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidPattern(text.to_string());
        let text = text.trim();
        if let Some(group) = text.strip_suffix(".*") {
            let g = icd9_group(group).map_err(|_| bad())?;
            if g != group {
                return Err(bad());
            }
            Ok(CodePattern::Group(g))
        } else {
            icd9_group(text).map_err(|_| bad())?;
            Ok(CodePattern::Exact(text.to_string()))
        }
    }

    pub fn matches(&self, code: &str) -> bool {
        match self {
            CodePattern::Exact(c) => c == code.trim(),
            CodePattern::Group(g) => icd9_group(code).is_ok_and(|x| &x == g),
        }
    }

    /// Concrete codes of the synthetic universe matched by this pattern.
    pub fn expand(&self) -> Vec<String> {
        match self {
            CodePattern::Exact(c) => vec![c.clone()],
            CodePattern::Group(g) => CodeUniverse::subcodes(g),
        }
    }
}

impl TryFrom<String> for CodePattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        CodePattern::parse(&s)
    }
}

impl From<CodePattern> for String {
    fn from(p: CodePattern) -> String {
        match p {
            CodePattern::Exact(c) => c,
            CodePattern::Group(g) => format!("{g}.*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disease {
    pub name: String,
    pub patterns: Vec<CodePattern>,
}

impl Disease {
    pub fn matches(&self, code: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(code))
    }

    /// Concrete qualifying codes, sorted and deduplicated.
    pub fn codes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.patterns.iter().flat_map(CodePattern::expand).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Diseases keyed by a short identifier, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseRegistry {
    pub diseases: IndexMap<String, Disease>,
}

impl Default for DiseaseRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl DiseaseRegistry {
    /// Cognitive disorders with their ICD-9 codes; `*` takes a whole group.
    pub fn standard() -> Self {
        let table: [(&str, &str, &[&str]); 8] = [
            ("mci", "Mild Cognitive Impairment", &["331.83", "331.89", "331.9"]),
            (
                "alzheimers",
                "Alzheimer's Disease",
                &["331.0", "331.2", "331.6", "331.7"],
            ),
            ("parkinsons", "Parkinson's Disease", &["332.*"]),
            ("dementia", "Dementia", &["290.*", "291.*", "294.*", "331.82"]),
            ("amnesia", "Amnesia", &["780.93"]),
            ("huntingtons", "Huntington's Disease", &["333.4"]),
            ("obstructions", "Mechanical Obstructions", &["331.3", "331.4", "331.5"]),
            ("ftd", "Frontotemporal Dementia", &["331.1", "331.11", "331.19"]),
        ];
        let diseases = table
            .into_iter()
            .map(|(key, name, codes)| {
                let patterns = codes
                    .iter()
                    .map(|c| CodePattern::parse(c).expect("registry patterns are valid"))
                    .collect();
                (
                    key.to_string(),
                    Disease {
                        name: name.to_string(),
                        patterns,
                    },
                )
            })
            .collect();
        DiseaseRegistry { diseases }
    }

    pub fn get(&self, key: &str) -> Result<&Disease> {
        self.diseases
            .get(key)
            .ok_or_else(|| Error::UnknownDisease(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.diseases.keys().map(String::as_str)
    }

    /// Whether `code` belongs to any registered disease.
    pub fn is_cognitive(&self, code: &str) -> bool {
        self.diseases.values().any(|d| d.matches(code))
    }

    /// Cognitive codes that do not qualify for `key`.
    pub fn other_cognitive_codes(&self, key: &str) -> Result<Vec<String>> {
        let own = self.get(key)?;
        let mut out: Vec<String> = self
            .diseases
            .iter()
            .filter(|(k, _)| k.as_str() != key)
            .flat_map(|(_, d)| d.codes())
            .filter(|c| !own.matches(c))
            .collect();
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Groups touched by any registered pattern.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .diseases
            .values()
            .flat_map(|d| d.patterns.iter())
            .map(|p| match p {
                CodePattern::Exact(c) => icd9_group(c).expect("validated"),
                CodePattern::Group(g) => g.clone(),
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}
