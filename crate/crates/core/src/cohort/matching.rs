//! Greedy age matching of controls to cases.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Someone to be matched: an identifier and an age in years.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub age: u32,
}

/// Visits cases in random order and gives each the `per_case` closest
/// unused controls within `tolerance` years (ties by pool position).
/// Returns the retained control positions in pool order.
pub fn age_match<R: Rng + ?Sized>(
    cases: &[Candidate],
    controls: &[Candidate],
    tolerance: u32,
    per_case: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if controls.is_empty() {
        return Err(Error::EmptyControlPool);
    }
    if per_case == 0 {
        return Err(Error::InvalidConfig("controls per case must be positive".into()));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(rng);
    let mut used = vec![false; controls.len()];
    let mut unmatched = Vec::new();
    for c in order {
        let age = cases[c].age;
        let mut near: Vec<(u32, usize)> = controls
            .iter()
            .enumerate()
            .filter(|(j, k)| !used[*j] && k.age.abs_diff(age) <= tolerance)
            .map(|(j, k)| (k.age.abs_diff(age), j))
            .collect();
        near.sort_unstable();
        if near.len() < per_case {
            unmatched.push(cases[c].id.clone());
            continue;
        }
        for &(_, j) in &near[..per_case] {
            used[j] = true;
        }
    }
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::UnmatchedCases(unmatched));
    }
    Ok((0..controls.len()).filter(|&j| used[j]).collect())
}
