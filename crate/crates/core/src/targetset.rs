//! Candidate sets for evaluation: the full catalog, or the relevant item
//! plus `eta` negatives sampled uniformly or by popularity.
//!
//! Negatives always come from `N = I \ {relevant} \ set(prefix)` and are
//! drawn without replacement. Popularity sampling is equivalent to
//! repeated draws proportional to count with the drawn item removed and
//! the rest renormalized; it is implemented with exponential keys
//! (`ln(u) / w`, keep the `eta` largest), which has exactly that
//! distribution and runs in one pass over the pool.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvaluationInstance;
use crate::metrics::{MetricError, RankedList};

#[derive(Debug, Error, PartialEq)]
pub enum TargetSetError {
    #[error("no negative items left for user {user}: every catalog item is the target or in the prefix")]
    EmptyPool { user: usize },
    #[error("sampled strategies need eta >= 1")]
    ZeroEta,
    #[error("item {item} has non-finite score {score}")]
    NonFiniteScore { item: usize, score: f64 },
    #[error("got {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("relevant item {relevant} is outside the catalog of {num_items} items")]
    OutOfCatalog { relevant: usize, num_items: usize },
    #[error("popularity counts cover {got} items, catalog has {expected}")]
    CountLength { expected: usize, got: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Full,
    Uniform,
    Popularity,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Uniform => "uniform",
            Strategy::Popularity => "popularity",
        }
    }

    pub fn is_sampled(self) -> bool {
        self != Strategy::Full
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Strategy::Full),
            "uniform" => Ok(Strategy::Uniform),
            "popularity" | "popular" | "pop" => Ok(Strategy::Popularity),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

/// What to do with pool items whose popularity count is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroCountPolicy {
    #[default]
    Exclude,
    AddOne,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSetSpec {
    pub strategy: Strategy,
    /// Number of negatives; ignored by `Full`.
    pub eta: usize,
    pub seed: u64,
    /// Drop prefix items from full target sets too.
    #[serde(default)]
    pub exclude_seen_in_full: bool,
    #[serde(default)]
    pub zero_counts: ZeroCountPolicy,
}

impl TargetSetSpec {
    pub fn full() -> Self {
        Self {
            strategy: Strategy::Full,
            eta: 0,
            seed: 0,
            exclude_seen_in_full: false,
            zero_counts: ZeroCountPolicy::Exclude,
        }
    }

    pub fn sampled(strategy: Strategy, eta: usize, seed: u64) -> Self {
        Self {
            strategy,
            eta,
            seed,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), TargetSetError> {
        if self.strategy.is_sampled() && self.eta == 0 {
            return Err(TargetSetError::ZeroEta);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingWarning {
    /// Fewer eligible negatives than requested; all of them were taken.
    PoolExhausted { requested: usize, available: usize },
    /// Every pool item had zero popularity; sampled uniformly instead.
    AllZeroCounts,
}

/// Candidate items for one instance, ascending, containing `relevant` once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub candidates: Vec<usize>,
    pub relevant: usize,
    pub warning: Option<SamplingWarning>,
}

impl TargetSet {
    fn from_negatives(mut negatives: Vec<usize>, relevant: usize, warning: Option<SamplingWarning>) -> Self {
        negatives.push(relevant);
        negatives.sort_unstable();
        Self {
            candidates: negatives,
            relevant,
            warning,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn check_relevant(instance: &EvaluationInstance, num_items: usize) -> Result<(), TargetSetError> {
    if instance.relevant >= num_items {
        return Err(TargetSetError::OutOfCatalog {
            relevant: instance.relevant,
            num_items,
        });
    }
    Ok(())
}

/// `N = I \ {relevant} \ set(prefix)`, ascending.
pub fn negative_pool(instance: &EvaluationInstance, num_items: usize) -> Vec<usize> {
    (0..num_items)
        .filter(|&i| i != instance.relevant && !instance.has_seen(i))
        .collect()
}

/// The whole catalog (optionally minus prefix items other than the target).
pub fn build_full(
    instance: &EvaluationInstance,
    num_items: usize,
    exclude_seen: bool,
) -> Result<TargetSet, TargetSetError> {
    check_relevant(instance, num_items)?;
    let candidates = (0..num_items)
        .filter(|&i| !exclude_seen || i == instance.relevant || !instance.has_seen(i))
        .collect();
    Ok(TargetSet {
        candidates,
        relevant: instance.relevant,
        warning: None,
    })
}

pub fn build_uniform<R: Rng + ?Sized>(
    instance: &EvaluationInstance,
    num_items: usize,
    eta: usize,
    rng: &mut R,
) -> Result<TargetSet, TargetSetError> {
    check_relevant(instance, num_items)?;
    if eta == 0 {
        return Err(TargetSetError::ZeroEta);
    }
    let pool = negative_pool(instance, num_items);
    uniform_from_pool(&pool, instance, eta, rng, None)
}

fn uniform_from_pool<R: Rng + ?Sized>(
    pool: &[usize],
    instance: &EvaluationInstance,
    eta: usize,
    rng: &mut R,
    warning: Option<SamplingWarning>,
) -> Result<TargetSet, TargetSetError> {
    if pool.is_empty() {
        return Err(TargetSetError::EmptyPool { user: instance.user });
    }
    let take = eta.min(pool.len());
    let warning = warning.or_else(|| {
        (take < eta).then_some(SamplingWarning::PoolExhausted {
            requested: eta,
            available: pool.len(),
        })
    });
    let negatives = rand::seq::index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    Ok(TargetSet::from_negatives(negatives, instance.relevant, warning))
}

pub fn build_popularity<R: Rng + ?Sized>(
    instance: &EvaluationInstance,
    num_items: usize,
    eta: usize,
    counts: &[u64],
    zero_counts: ZeroCountPolicy,
    rng: &mut R,
) -> Result<TargetSet, TargetSetError> {
    check_relevant(instance, num_items)?;
    if eta == 0 {
        return Err(TargetSetError::ZeroEta);
    }
    if counts.len() != num_items {
        return Err(TargetSetError::CountLength {
            expected: num_items,
            got: counts.len(),
        });
    }
    let pool = negative_pool(instance, num_items);
    let weighted: Vec<(usize, f64)> = pool
        .iter()
        .map(|&i| {
            let w = counts[i] as f64
                + if zero_counts == ZeroCountPolicy::AddOne {
                    1.0
                } else {
                    0.0
                };
            (i, w)
        })
        .filter(|&(_, w)| w > 0.0)
        .collect();
    if weighted.is_empty() {
        if !pool.is_empty() {
            log::warn!(
                "user {}: all negative candidates have zero popularity; sampling uniformly",
                instance.user
            );
        }
        return uniform_from_pool(&pool, instance, eta, rng, Some(SamplingWarning::AllZeroCounts));
    }
    let take = eta.min(weighted.len());
    let warning = (take < eta).then_some(SamplingWarning::PoolExhausted {
        requested: eta,
        available: weighted.len(),
    });
    let negatives = weighted_sample_without_replacement(&weighted, take, rng);
    Ok(TargetSet::from_negatives(negatives, instance.relevant, warning))
}

/// Draws `m` distinct items with probability proportional to weight, one
/// at a time with renormalization, via exponential keys.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(
    weighted: &[(usize, f64)],
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    let m = m.min(weighted.len());
    if m == weighted.len() {
        return weighted.iter().map(|&(i, _)| i).collect();
    }
    let mut keyed: Vec<(f64, usize)> = weighted
        .iter()
        .map(|&(i, w)| {
            // 1 - gen() lies in (0, 1], so ln is finite.
            let u: f64 = 1.0 - rng.gen::<f64>();
            (u.ln() / w, i)
        })
        .collect();
    let by_key_desc =
        |a: &(f64, usize), b: &(f64, usize)| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if m > 0 {
        keyed.select_nth_unstable_by(m - 1, by_key_desc);
    }
    keyed.truncate(m);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Builds the target set for `spec.strategy`.
pub fn build<R: Rng + ?Sized>(
    instance: &EvaluationInstance,
    num_items: usize,
    spec: &TargetSetSpec,
    counts: &[u64],
    rng: &mut R,
) -> Result<TargetSet, TargetSetError> {
    match spec.strategy {
        Strategy::Full => build_full(instance, num_items, spec.exclude_seen_in_full),
        Strategy::Uniform => build_uniform(instance, num_items, spec.eta, rng),
        Strategy::Popularity => build_popularity(instance, num_items, spec.eta, counts, spec.zero_counts, rng),
    }
}

fn check_scores(scores: &[f64], candidates: &[usize]) -> Result<(), TargetSetError> {
    if scores.len() != candidates.len() {
        return Err(TargetSetError::ScoreCount {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(TargetSetError::NonFiniteScore {
            item: candidates[j],
            score: scores[j],
        });
    }
    Ok(())
}

/// Sorts candidates by descending score, breaking ties by ascending item
/// index.
pub fn rank_target_set(scores: &[f64], candidates: &[usize]) -> Result<RankedList, TargetSetError> {
    check_scores(scores, candidates)?;
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(RankedList::new(order.into_iter().map(|(_, i)| i).collect())?)
}

/// 1-based rank `rank_target_set` would give `relevant`, in one linear pass.
pub fn rank_of_relevant(scores: &[f64], candidates: &[usize], relevant: usize) -> Result<usize, TargetSetError> {
    check_scores(scores, candidates)?;
    let pos = candidates
        .iter()
        .position(|&c| c == relevant)
        .ok_or(MetricError::RelevantMissing(relevant))?;
    let s = scores[pos];
    let ahead = scores
        .iter()
        .zip(candidates)
        .filter(|&(&x, &c)| x > s || (x == s && c < relevant))
        .count();
    Ok(ahead + 1)
}
