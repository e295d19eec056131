//! Stability indices for families of equal-size feature subsets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConsistencyError {
    #[error("invalid subset family: {0}")]
    InvalidFamily(String),
    #[error(
        "subset size {kappa} leaves no room for chance correction in a universe of {universe}"
    )]
    InvalidCardinality { kappa: usize, universe: usize },
}

/// `n >= 2` feature subsets of a common size `kappa >= 1`, drawn from
/// `0..universe_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetFamily {
    subsets: Vec<BTreeSet<usize>>,
    universe_size: usize,
}

impl SubsetFamily {
    pub fn new<I, S>(subsets: I, universe_size: usize) -> Result<Self, ConsistencyError>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = usize>,
    {
        let subsets: Vec<BTreeSet<usize>> = subsets
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let bad = |m: String| Err(ConsistencyError::InvalidFamily(m));
        if subsets.len() < 2 {
            return bad(format!("need at least two subsets, got {}", subsets.len()));
        }
        let kappa = subsets[0].len();
        if kappa == 0 {
            return bad("subsets are empty".into());
        }
        if subsets.iter().any(|s| s.len() != kappa) {
            return bad("subsets differ in size".into());
        }
        if let Some(&f) = subsets.iter().flatten().find(|&&f| f >= universe_size) {
            return bad(format!("feature {f} outside universe of {universe_size}"));
        }
        Ok(SubsetFamily {
            subsets,
            universe_size,
        })
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn subset_size(&self) -> usize {
        self.subsets[0].len()
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn subsets(&self) -> &[BTreeSet<usize>] {
        &self.subsets
    }

    /// Number of subsets each feature appears in.
    fn presence(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &f in self.subsets.iter().flatten() {
            *counts.entry(f).or_insert(0) += 1;
        }
        counts
    }
}

/// `|intersection| / |union|` over all subsets.
pub fn jaccard_multi(fam: &SubsetFamily) -> f64 {
    let counts = fam.presence();
    let common = counts.values().filter(|&&c| c == fam.len()).count();
    common as f64 / counts.len() as f64
}

/// Denominator of the presence fractions in [`weighted_consistency`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresenceBase {
    /// Features selected by at least one subset.
    #[default]
    Union,
    /// Every feature of the universe.
    Universe,
}

/// Majority-weighted consistency.
///
/// For `j` in `K = {floor(n/2)+1, .., n}`, `P_j` is the fraction of
/// features present in at least `j` subsets and the weights are
/// `j / sum(K)`. With `n = 2` this equals [`jaccard_multi`].
pub fn weighted_consistency(fam: &SubsetFamily) -> f64 {
    weighted_consistency_with(fam, PresenceBase::Union)
}

pub fn weighted_consistency_with(fam: &SubsetFamily, base: PresenceBase) -> f64 {
    let counts = fam.presence();
    let n = fam.len();
    let denom = match base {
        PresenceBase::Union => counts.len(),
        PresenceBase::Universe => fam.universe_size,
    } as f64;
    let majority = n / 2 + 1;
    let weight_sum: usize = (majority..=n).sum();
    (majority..=n)
        .map(|j| {
            let present = counts.values().filter(|&&c| c >= j).count() as f64;
            (j as f64 / weight_sum as f64) * present / denom
        })
        .sum()
}

/// Two-set Jaccard index.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Chance-corrected similarity `(r s - k^2) / (k (s - k))` of two subsets
/// of equal size `k` in a universe of `s` features.
pub fn kuncheva(
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    s: usize,
) -> Result<f64, ConsistencyError> {
    let kappa = a.len();
    if b.len() != kappa {
        return Err(ConsistencyError::InvalidFamily(
            "subsets differ in size".into(),
        ));
    }
    if kappa == 0 || kappa >= s {
        return Err(ConsistencyError::InvalidCardinality { kappa, universe: s });
    }
    let r = a.intersection(b).count() as f64;
    Ok(kuncheva_from_counts(r, kappa as f64, s as f64))
}

/// The Kuncheva formula on raw counts; `r` may be fractional.
pub fn kuncheva_from_counts(r: f64, kappa: f64, s: f64) -> f64 {
    (r * s - kappa * kappa) / (kappa * (s - kappa))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
