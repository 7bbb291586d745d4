//! Fixed score functions with known full-catalog behaviour, and the exact
//! expected metric under uniform sampling.
//!
//! Scores are per `(prefix, item)` and never depend on which other items
//! are in the candidate set, so an item's position relative to the
//! relevant one is the same in the full catalog and in any sample.

use std::collections::HashMap;

use super::{check_items, ModelError, ScoreFunction};
use crate::dataset::synthetic::zipf_dataset;
use crate::dataset::EvaluationInstance;
use crate::metrics::MetricSpec;
use crate::rng::mix64;

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn prefix_key(seed: u64, prefix: &[usize]) -> u64 {
    prefix.iter().fold(mix64(seed), |h, &i| mix64(h ^ i as u64))
}

/// Pseudo-random score in `[0, 1)` for `item` after `prefix`.
pub fn base_score(seed: u64, prefix: &[usize], item: usize) -> f64 {
    unit(mix64(prefix_key(seed, prefix) ^ mix64(item as u64 + 1)))
}

/// Scores every item by a hash of `(seed, prefix, item)`.
#[derive(Clone, Debug)]
pub struct TableScorer {
    name: String,
    num_items: usize,
    seed: u64,
}

impl TableScorer {
    pub fn hashed(name: &str, num_items: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            num_items,
            seed,
        }
    }
}

impl ScoreFunction for TableScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        check_items(candidates, self.num_items)?;
        Ok(candidates.iter().map(|&c| base_score(self.seed, prefix, c)).collect())
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

/// How an [`OracleScorer`] treats the relevant item of a known instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleRule {
    /// Relevant items below `head` (the most popular ones) score above
    /// everything; others keep their random base score.
    Head { head: usize },
    /// The relevant item lands at exactly this 1-based rank over the
    /// whole catalog.
    FixedRank { rank: usize },
}

/// A scorer that knows each instance's relevant item, keyed by prefix.
/// Prefixes it has not seen get plain base scores.
#[derive(Clone, Debug)]
pub struct OracleScorer {
    name: String,
    num_items: usize,
    seed: u64,
    rule: OracleRule,
    relevant: HashMap<Vec<usize>, (usize, f64)>,
}

impl OracleScorer {
    pub fn new(
        name: &str,
        num_items: usize,
        seed: u64,
        rule: OracleRule,
        instances: &[EvaluationInstance],
    ) -> Result<Self, ModelError> {
        if let OracleRule::FixedRank { rank } = rule {
            if rank == 0 || rank > num_items {
                return Err(ModelError::InvalidConfig(format!(
                    "rank {rank} outside 1..={num_items}"
                )));
            }
        }
        let mut relevant = HashMap::with_capacity(instances.len());
        for inst in instances {
            check_items(&[inst.relevant], num_items)?;
            let score = match rule {
                OracleRule::Head { head } if inst.relevant < head => 2.0,
                OracleRule::Head { .. } => base_score(seed, &inst.prefix, inst.relevant),
                OracleRule::FixedRank { rank } => {
                    let mut others: Vec<f64> = (0..num_items)
                        .filter(|&i| i != inst.relevant)
                        .map(|i| base_score(seed, &inst.prefix, i))
                        .collect();
                    others.sort_by(|a, b| b.total_cmp(a));
                    let above = if rank == 1 { 1.0 } else { others[rank - 2] };
                    let below = others.get(rank - 1).copied().unwrap_or(0.0);
                    0.5 * (above + below)
                }
            };
            if relevant.insert(inst.prefix.clone(), (inst.relevant, score)).is_some() {
                return Err(ModelError::InvalidConfig(
                    "instances must have distinct prefixes".into(),
                ));
            }
        }
        Ok(Self {
            name: name.to_string(),
            num_items,
            seed,
            rule,
            relevant,
        })
    }

    pub fn rule(&self) -> OracleRule {
        self.rule
    }
}

impl ScoreFunction for OracleScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        check_items(candidates, self.num_items)?;
        let known = self.relevant.get(prefix);
        Ok(candidates
            .iter()
            .map(|&c| match known {
                Some(&(r, s)) if r == c => s,
                _ => base_score(self.seed, prefix, c),
            })
            .collect())
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

/// Leave-last-out instances from a Zipf dataset, keeping the first
/// instance for each distinct prefix.
pub fn zipf_instances(
    num_items: usize,
    num_users: usize,
    length: usize,
    exponent: f64,
    seed: u64,
) -> Vec<EvaluationInstance> {
    let ds = zipf_dataset(num_items, num_users, length, exponent, seed);
    let mut seen = std::collections::HashSet::new();
    ds.sequences
        .iter()
        .enumerate()
        .filter_map(|(user, s)| {
            let (&relevant, prefix) = s.split_last()?;
            seen.insert(prefix.to_vec())
                .then(|| EvaluationInstance::new(user, prefix.to_vec(), relevant))
        })
        .collect()
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Distribution of the number of higher-scored negatives that land in a
/// uniform sample of `eta` from a pool of `pool` items, `above` of which
/// outscore the relevant item. Entry `x` is `P(X = x)`.
pub fn hypergeometric_pmf(pool: usize, above: usize, eta: usize) -> Vec<f64> {
    assert!(above <= pool, "{above} higher-scored items in a pool of {pool}");
    let eta = eta.min(pool);
    let lo = (eta + above).saturating_sub(pool);
    let hi = above.min(eta);
    let mut pmf = vec![0.0; hi + 1];
    let mut p = (ln_binomial(above, lo) + ln_binomial(pool - above, eta - lo) - ln_binomial(pool, eta)).exp();
    pmf[lo] = p;
    for x in lo..hi {
        p *= ((above - x) * (eta - x)) as f64 / ((x + 1) * (pool + x + 1 - above - eta)) as f64;
        pmf[x + 1] = p;
    }
    pmf
}

/// Exact expected metric for one instance under uniform sampling: the
/// relevant item's sampled rank is one plus the hypergeometric count of
/// higher-scored items drawn.
pub fn expected_sampled_metric(pool: usize, above: usize, eta: usize, metric: MetricSpec) -> f64 {
    hypergeometric_pmf(pool, above, eta)
        .iter()
        .enumerate()
        .map(|(x, p)| p * metric.at_rank(x + 1))
        .sum()
}

/// Mean of [`expected_sampled_metric`] over instances, counting for each
/// instance the pool items (catalog minus target and prefix) that the
/// scorer puts above the relevant item.
pub fn expected_uniform_mean(
    scorer: &dyn ScoreFunction,
    instances: &[EvaluationInstance],
    num_items: usize,
    eta: usize,
    metric: MetricSpec,
) -> Result<f64, ModelError> {
    let mut values = Vec::with_capacity(instances.len());
    for inst in instances {
        let pool = crate::targetset::negative_pool(inst, num_items);
        let mut candidates = pool.clone();
        candidates.push(inst.relevant);
        let scores = scorer.score(&inst.prefix, &candidates)?;
        let s = scores[pool.len()];
        let above = pool
            .iter()
            .zip(&scores)
            .filter(|&(&i, &x)| x > s || (x == s && i < inst.relevant))
            .count();
        values.push(expected_sampled_metric(pool.len(), above, eta, metric));
    }
    Ok(crate::metrics::pairwise_sum(&values) / values.len().max(1) as f64)
}
