//! ICD-9 code grouping and the synthetic code universe.

use crate::error::{Error, Result};

/// Group code of an ICD-9 diagnosis: the part before the decimal point,
/// cut to three characters (four for `E` codes).
///
/// ```
/// # use metapred::cohort::icd9_group;
/// assert_eq!(icd9_group("331.83").unwrap(), "331");
/// assert_eq!(icd9_group("V12.54").unwrap(), "V12");
/// assert_eq!(icd9_group("E880.9").unwrap(), "E880");
/// ```
pub fn icd9_group(code: &str) -> Result<String> {
    let malformed = || Error::MalformedCode(code.to_string());
    let code = code.trim();
    let (head, tail) = match code.split_once('.') {
        Some((h, t)) => (h, Some(t)),
        None => (code, None),
    };
    if let Some(t) = tail {
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
    }
    let (prefix, digits, keep) = match head.as_bytes().first() {
        Some(b'E' | b'e') => ("E", &head[1..], 4),
        Some(b'V' | b'v') => ("V", &head[1..], 3),
        Some(_) => ("", head, 3),
        None => return Err(malformed()),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let group = format!("{prefix}{digits}");
    Ok(group.chars().take(keep).collect())
}

/// Number of numeric groups `001`..`999`.
const NUMERIC_GROUPS: usize = 999;
/// Supplementary `V` groups `V01`..`V17`.
const V_GROUPS: usize = 17;

/// The fixed set of group codes the generator draws from, sorted, with
/// model index = position + 1 (0 is padding).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeUniverse {
    groups: Vec<String>,
}

impl Default for CodeUniverse {
    fn default() -> Self {
        Self::new()
    }
}

impl CodeUniverse {
    pub fn new() -> Self {
        let mut groups: Vec<String> = (1..=NUMERIC_GROUPS).map(|g| format!("{g:03}")).collect();
        groups.extend((1..=V_GROUPS).map(|g| format!("V{g:02}")));
        groups.sort();
        CodeUniverse { groups }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Model vocabulary size including padding.
    pub fn vocab(&self) -> usize {
        self.groups.len() + 1
    }

    pub fn index_of_group(&self, group: &str) -> Option<u32> {
        self.groups
            .binary_search_by(|g| g.as_str().cmp(group))
            .ok()
            .map(|i| i as u32 + 1)
    }

    /// Model index of a raw diagnosis code.
    pub fn index_of_code(&self, code: &str) -> Result<u32> {
        let g = icd9_group(code)?;
        self.index_of_group(&g).ok_or(Error::MalformedCode(code.to_string()))
    }

    pub fn group_of_index(&self, index: u32) -> Option<&str> {
        (index as usize)
            .checked_sub(1)
            .and_then(|i| self.groups.get(i))
            .map(String::as_str)
    }

    /// Raw codes the generator uses for a group: its ten one-decimal
    /// subcodes.
    pub fn subcodes(group: &str) -> Vec<String> {
        (0..10).map(|d| format!("{group}.{d}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_examples() {
        assert_eq!(icd9_group("331.83").unwrap(), "331");
        assert_eq!(icd9_group("780.93").unwrap(), "780");
        assert_eq!(icd9_group("331").unwrap(), "331");
        assert_eq!(icd9_group("V01.1").unwrap(), "V01");
        assert_eq!(icd9_group(" 290.0 ").unwrap(), "290");
        assert_eq!(icd9_group("E8801").unwrap(), "E880");
    }

    #[test]
    fn malformed_codes() {
        for bad in ["", ".", "33a.1", "331.", "331.x", "E", "V.1", "abc"] {
            assert!(icd9_group(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn universe_layout() {
        let u = CodeUniverse::new();
        assert_eq!(u.len(), 1016);
        assert_eq!(u.vocab(), 1017);
        assert_eq!(u.index_of_group("001"), Some(1));
        assert_eq!(u.index_of_group("999"), Some(999));
        assert_eq!(u.index_of_group("V17"), Some(1016));
        assert_eq!(u.index_of_group("V18"), None);
        assert_eq!(u.index_of_code("331.83").unwrap(), 331);
        assert_eq!(u.group_of_index(331), Some("331"));
        assert_eq!(u.group_of_index(0), None);
        for (i, g) in u.groups().iter().enumerate() {
            assert_eq!(u.index_of_group(g), Some(i as u32 + 1));
        }
    }
}
