//! HR@k and NDCG@k for a single relevant item.
//!
//! NDCG uses a base-2 logarithm and is normalized by the ideal DCG of a
//! single relevant item (which is 1), so a hit at rank `p <= k` scores
//! `1 / log2(p + 1)`. [`NdcgForm::RawNaturalLog`] gives the unnormalized
//! `1 / ln(p + 1)` form for literal comparisons.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("relevant item {0} is not in the ranking")]
    RelevantMissing(usize),
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("cannot average over zero instances")]
    Empty,
    #[error("duplicate item {0} in ranking")]
    Duplicate(usize),
    #[error("unknown metric `{0}` (expected HR@k or NDCG@k)")]
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "HR")]
    HitRate,
    #[serde(rename = "NDCG")]
    Ndcg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, k: usize) -> Result<Self, MetricError> {
        if k == 0 {
            return Err(MetricError::ZeroCutoff);
        }
        Ok(Self { kind, k })
    }

    pub fn hr(k: usize) -> Self {
        Self::new(MetricKind::HitRate, k).expect("k >= 1")
    }

    pub fn ndcg(k: usize) -> Self {
        Self::new(MetricKind::Ndcg, k).expect("k >= 1")
    }

    /// Metric value for the relevant item at 1-based `rank`.
    pub fn at_rank(&self, rank: usize) -> f64 {
        match self.kind {
            MetricKind::HitRate => hit_rate_from_rank(rank, self.k),
            MetricKind::Ndcg => ndcg_from_rank(rank, self.k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::HitRate => "HR",
            MetricKind::Ndcg => "NDCG",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for MetricSpec {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || MetricError::Unknown(s.to_string());
        let (name, k) = s.split_once('@').ok_or_else(unknown)?;
        let k: usize = k.trim().parse().map_err(|_| unknown())?;
        let kind = match name.trim().to_ascii_uppercase().as_str() {
            "HR" | "HIT" | "RECALL" => MetricKind::HitRate,
            "NDCG" => MetricKind::Ndcg,
            _ => return Err(unknown()),
        };
        Self::new(kind, k)
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = MetricError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NdcgForm {
    #[default]
    NormalizedLog2,
    RawNaturalLog,
}

/// Items in descending score order with a 1-based position lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    items: Vec<usize>,
    positions: HashMap<usize, usize>,
}

impl RankedList {
    pub fn new(items: Vec<usize>) -> Result<Self, MetricError> {
        let mut positions = HashMap::with_capacity(items.len());
        for (p, &i) in items.iter().enumerate() {
            if positions.insert(i, p + 1).is_some() {
                return Err(MetricError::Duplicate(i));
            }
        }
        Ok(Self { items, positions })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based position of `item`.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.positions.get(&item).copied()
    }
}

pub fn hit_rate_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn relevant_rank(ranking: &RankedList, relevant: usize, k: usize) -> Result<usize, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    ranking.rank_of(relevant).ok_or(MetricError::RelevantMissing(relevant))
}

pub fn hit_rate_at_k(ranking: &RankedList, relevant: usize, k: usize) -> Result<f64, MetricError> {
    Ok(hit_rate_from_rank(relevant_rank(ranking, relevant, k)?, k))
}

pub fn ndcg_at_k(ranking: &RankedList, relevant: usize, k: usize) -> Result<f64, MetricError> {
    Ok(ndcg_from_rank(relevant_rank(ranking, relevant, k)?, k))
}

pub fn ndcg_at_k_with(ranking: &RankedList, relevant: usize, k: usize, form: NdcgForm) -> Result<f64, MetricError> {
    let p = relevant_rank(ranking, relevant, k)?;
    Ok(match form {
        NdcgForm::NormalizedLog2 => ndcg_from_rank(p, k),
        NdcgForm::RawNaturalLog if p <= k => 1.0 / ((p + 1) as f64).ln(),
        NdcgForm::RawNaturalLog => 0.0,
    })
}

pub fn metric_value(ranking: &RankedList, relevant: usize, spec: MetricSpec) -> Result<f64, MetricError> {
    Ok(spec.at_rank(relevant_rank(ranking, relevant, spec.k)?))
}

/// Pairwise (cascade) summation: the result depends only on the order of
/// `values`, and the rounding error grows as `O(log n)`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pairwise_sum(values) / values.len() as f64)
}

/// Mean metric over `(ranking, relevant)` instances.
pub fn mean_metric(instances: &[(RankedList, usize)], spec: MetricSpec) -> Result<f64, MetricError> {
    let values = instances
        .iter()
        .map(|(r, rel)| metric_value(r, *rel, spec))
        .collect::<Result<Vec<_>, _>>()?;
    mean(&values)
}
