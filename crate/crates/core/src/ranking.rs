//! Model rankings, Kendall's Tau-a, repeated sampled runs and η sweeps.
//!
//! Evaluation builds one target set per instance and scores every model
//! on that same set, so models within a run are compared on identical
//! candidates. Instances are scored in parallel; each instance draws from
//! its own stream (`instance_rng`), and means use pairwise summation in
//! instance order, so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvaluationInstance;
use crate::metrics::{pairwise_sum, MetricError, MetricSpec};
use crate::models::{ModelError, ScoreFunction};
use crate::rng::{derive_seed, instance_rng};
use crate::targetset::{self, Strategy, TargetSetError, TargetSetSpec};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("ranking needs at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("model `{model}` has non-finite mean {value}")]
    NonFiniteMean { model: String, value: f64 },
    #[error("model `{0}` appears twice")]
    DuplicateModel(String),
    #[error("rankings cover different model sets")]
    MismatchedModels,
    #[error("ranks {0:?} are not a permutation of 1..m")]
    NotPermutation(Vec<usize>),
    #[error("models `{0}` and `{1}` share a rank; Tau-a needs tie-free rankings")]
    Ties(String, String),
    #[error("repeated runs need a sampled strategy; the full target set has no randomness")]
    FullStrategy,
    #[error("run count must be at least 1")]
    ZeroRuns,
    #[error("sample sizes must be positive")]
    ZeroEta,
    #[error("no evaluation instances")]
    NoInstances,
    #[error("model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    TargetSet(#[from] TargetSetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: String,
    /// Absent when the ranking was given as rank vectors only.
    pub mean: Option<f64>,
    pub rank: usize,
}

/// Models ordered by rank, rank 1 first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub entries: Vec<RankEntry>,
    pub metric: MetricSpec,
    pub strategy: TargetSetSpec,
    /// Set when exact mean ties were broken by model name.
    pub tie_warning: Option<String>,
}

impl ModelRanking {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank_of(&self, model: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.model == model).map(|e| e.rank)
    }

    /// Model name to rank.
    pub fn ranks(&self) -> BTreeMap<&str, usize> {
        self.entries.iter().map(|e| (e.model.as_str(), e.rank)).collect()
    }

    pub fn models(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.model.as_str()).collect()
    }
}

/// Ranks models by descending mean. Exact ties go to the lexicographically
/// smaller name, with a warning.
pub fn rank_models(
    means: &[(String, f64)],
    metric: MetricSpec,
    strategy: TargetSetSpec,
) -> Result<ModelRanking, RankingError> {
    if means.len() < 2 {
        return Err(RankingError::TooFewModels(means.len()));
    }
    check_unique(means.iter().map(|(m, _)| m.as_str()))?;
    if let Some((model, value)) = means.iter().find(|(_, v)| !v.is_finite()) {
        return Err(RankingError::NonFiniteMean {
            model: model.clone(),
            value: *value,
        });
    }
    let mut order: Vec<&(String, f64)> = means.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tied: Vec<String> = order
        .windows(2)
        .filter(|w| w[0].1 == w[1].1)
        .map(|w| format!("{} = {}", w[0].0, w[1].0))
        .collect();
    let tie_warning = if tied.is_empty() {
        None
    } else {
        let msg = format!("exact mean ties broken by name: {}", tied.join(", "));
        log::warn!("{msg}");
        Some(msg)
    };
    let entries = order
        .into_iter()
        .enumerate()
        .map(|(i, (model, mean))| RankEntry {
            model: model.clone(),
            mean: Some(*mean),
            rank: i + 1,
        })
        .collect();
    Ok(ModelRanking {
        entries,
        metric,
        strategy,
        tie_warning,
    })
}

/// Builds a ranking straight from `(model, rank)` pairs.
pub fn from_ranks(
    ranks: &[(&str, usize)],
    metric: MetricSpec,
    strategy: TargetSetSpec,
) -> Result<ModelRanking, RankingError> {
    if ranks.len() < 2 {
        return Err(RankingError::TooFewModels(ranks.len()));
    }
    check_unique(ranks.iter().map(|(m, _)| *m))?;
    let mut sorted: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
    sorted.sort_unstable();
    if sorted.iter().enumerate().any(|(i, &r)| r != i + 1) {
        return Err(RankingError::NotPermutation(ranks.iter().map(|&(_, r)| r).collect()));
    }
    let mut entries: Vec<RankEntry> = ranks
        .iter()
        .map(|&(model, rank)| RankEntry {
            model: model.to_string(),
            mean: None,
            rank,
        })
        .collect();
    entries.sort_by_key(|e| e.rank);
    Ok(ModelRanking {
        entries,
        metric,
        strategy,
        tie_warning: None,
    })
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<(), RankingError> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(RankingError::DuplicateModel(n.to_string()));
        }
    }
    Ok(())
}

/// Tau-a with its exact rational form `numerator / denominator`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub concordant: usize,
    pub discordant: usize,
    pub m: usize,
    /// `2 (concordant - discordant)`.
    pub numerator: i64,
    /// `m (m - 1)`.
    pub denominator: i64,
    pub tau: f64,
}

impl TauResult {
    /// The ratio in lowest terms, denominator positive.
    pub fn reduced(&self) -> (i64, i64) {
        let g = gcd(self.numerator.unsigned_abs(), self.denominator.unsigned_abs()).max(1) as i64;
        (self.numerator / g, self.denominator / g)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for TauResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.tau)
    }
}

/// Rank pairs of the same models in both rankings, ordered by model name.
fn paired_ranks(r1: &ModelRanking, r2: &ModelRanking) -> Result<Vec<(String, usize, usize)>, RankingError> {
    let a = r1.ranks();
    let b = r2.ranks();
    if a.len() != r1.len() || b.len() != r2.len() || a.keys().ne(b.keys()) {
        return Err(RankingError::MismatchedModels);
    }
    Ok(a.iter().map(|(m, &x)| (m.to_string(), x, b[m])).collect())
}

/// Kendall's Tau-a between two tie-free rankings of the same models.
pub fn kendall_tau_a(r1: &ModelRanking, r2: &ModelRanking) -> Result<TauResult, RankingError> {
    let pairs = paired_ranks(r1, r2)?;
    let m = pairs.len();
    if m < 2 {
        return Err(RankingError::TooFewModels(m));
    }
    let (mut concordant, mut discordant) = (0usize, 0usize);
    for i in 0..m {
        for j in i + 1..m {
            let (ref a, x1, y1) = pairs[i];
            let (ref b, x2, y2) = pairs[j];
            if x1 == x2 || y1 == y2 {
                return Err(RankingError::Ties(a.clone(), b.clone()));
            }
            if (x1 < x2) == (y1 < y2) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let numerator = 2 * (concordant as i64 - discordant as i64);
    let denominator = (m * (m - 1)) as i64;
    Ok(TauResult {
        concordant,
        discordant,
        m,
        numerator,
        denominator,
        tau: numerator as f64 / denominator as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub consistent: bool,
    /// `(model, rank in first, rank in second)`, ordered by model name.
    pub pairs: Vec<(String, usize, usize)>,
}

/// Two rankings are consistent when every model holds the same rank.
pub fn consistency(r1: &ModelRanking, r2: &ModelRanking) -> Result<ConsistencyVerdict, RankingError> {
    let pairs = paired_ranks(r1, r2)?;
    Ok(ConsistencyVerdict {
        consistent: pairs.iter().all(|(_, a, b)| a == b),
        pairs,
    })
}

/// Per-instance ranks of one model in one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model: String,
    /// 1-based rank of the relevant item, in instance order.
    pub ranks: Vec<usize>,
}

impl ModelRun {
    pub fn values(&self, metric: MetricSpec) -> Vec<f64> {
        self.ranks.iter().map(|&r| metric.at_rank(r)).collect()
    }

    pub fn mean(&self, metric: MetricSpec) -> Result<f64, RankingError> {
        if self.ranks.is_empty() {
            return Err(RankingError::NoInstances);
        }
        Ok(pairwise_sum(&self.values(metric)) / self.ranks.len() as f64)
    }
}

/// All models scored on the same target sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub spec: TargetSetSpec,
    pub run_seed: u64,
    pub models: Vec<ModelRun>,
    /// Target-set sizes in instance order.
    pub target_sizes: Vec<usize>,
    /// Instances whose target set came with a sampling warning.
    pub warnings: usize,
}

impl EvaluationRun {
    pub fn means(&self, metric: MetricSpec) -> Result<Vec<(String, f64)>, RankingError> {
        self.models
            .iter()
            .map(|m| Ok((m.model.clone(), m.mean(metric)?)))
            .collect()
    }

    pub fn ranking(&self, metric: MetricSpec) -> Result<ModelRanking, RankingError> {
        rank_models(&self.means(metric)?, metric, self.spec.clone())
    }
}

/// Evaluates every model on one run's target sets, drawn under `run_seed`.
pub fn evaluate_models(
    models: &[&dyn ScoreFunction],
    instances: &[EvaluationInstance],
    num_items: usize,
    spec: &TargetSetSpec,
    counts: &[u64],
    run_seed: u64,
) -> Result<EvaluationRun, RankingError> {
    spec.validate()?;
    if instances.is_empty() {
        return Err(RankingError::NoInstances);
    }
    let per_instance: Vec<(Vec<usize>, usize, bool)> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = instance_rng(run_seed, idx as u64);
            let set = targetset::build(inst, num_items, spec, counts, &mut rng)?;
            let ranks = models
                .iter()
                .map(|m| {
                    let scores = m
                        .score(&inst.prefix, &set.candidates)
                        .map_err(|source| RankingError::Model {
                            model: m.name().to_string(),
                            source,
                        })?;
                    Ok(targetset::rank_of_relevant(&scores, &set.candidates, inst.relevant)?)
                })
                .collect::<Result<Vec<usize>, RankingError>>()?;
            Ok((ranks, set.len(), set.warning.is_some()))
        })
        .collect::<Result<_, RankingError>>()?;
    let models = models
        .iter()
        .enumerate()
        .map(|(j, m)| ModelRun {
            model: m.name().to_string(),
            ranks: per_instance.iter().map(|(r, _, _)| r[j]).collect(),
        })
        .collect();
    Ok(EvaluationRun {
        spec: spec.clone(),
        run_seed,
        models,
        target_sizes: per_instance.iter().map(|&(_, n, _)| n).collect(),
        warnings: per_instance.iter().filter(|&&(_, _, w)| w).count(),
    })
}

/// Single-run evaluation using the spec's own seed as run 0.
pub fn evaluate(
    models: &[&dyn ScoreFunction],
    instances: &[EvaluationInstance],
    num_items: usize,
    spec: &TargetSetSpec,
    counts: &[u64],
) -> Result<EvaluationRun, RankingError> {
    evaluate_models(models, instances, num_items, spec, counts, derive_seed(spec.seed, 0))
}

/// Full-catalog scores precomputed once per distinct prefix.
///
/// Every scorer in this crate scores an item independently of the other
/// candidates, so looking scores up here gives exactly what the wrapped
/// scorer would return. Unknown prefixes fall through to the scorer.
pub struct ScoreCache<'a> {
    inner: &'a dyn ScoreFunction,
    table: std::collections::HashMap<Vec<usize>, Vec<f64>>,
}

impl<'a> ScoreCache<'a> {
    pub fn build(
        inner: &'a dyn ScoreFunction,
        instances: &[EvaluationInstance],
        num_items: usize,
    ) -> Result<Self, RankingError> {
        let mut prefixes: Vec<&Vec<usize>> = instances.iter().map(|i| &i.prefix).collect();
        prefixes.sort();
        prefixes.dedup();
        let catalog: Vec<usize> = (0..num_items).collect();
        let table = prefixes
            .par_iter()
            .map(|&p| {
                let scores = inner.score(p, &catalog).map_err(|source| RankingError::Model {
                    model: inner.name().to_string(),
                    source,
                })?;
                Ok((p.clone(), scores))
            })
            .collect::<Result<_, RankingError>>()?;
        Ok(Self { inner, table })
    }
}

impl ScoreFunction for ScoreCache<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        match self.table.get(prefix) {
            Some(all) => candidates
                .iter()
                .map(|&c| {
                    all.get(c).copied().ok_or(ModelError::ItemOutOfRange {
                        item: c,
                        num_items: all.len(),
                    })
                })
                .collect(),
            None => self.inner.score(prefix, candidates),
        }
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }
}

/// Population standard deviation, shifted by the first value so identical
/// inputs give exactly zero.
pub fn std_dev(values: &[f64]) -> f64 {
    let Some(&shift) = values.first() else {
        return 0.0;
    };
    let n = values.len() as f64;
    let d: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
    let s1 = pairwise_sum(&d);
    let var = (pairwise_sum(&sq) - s1 * s1 / n) / n;
    var.max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    pub std: f64,
}

/// Means of each run, per model and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedEvaluation {
    pub spec: TargetSetSpec,
    pub metrics: Vec<MetricSpec>,
    pub models: Vec<String>,
    pub run_seeds: Vec<u64>,
    /// `run_means[run][model][metric]`.
    pub run_means: Vec<Vec<Vec<f64>>>,
}

impl RepeatedEvaluation {
    fn metric_index(&self, metric: MetricSpec) -> Result<usize, RankingError> {
        self.metrics
            .iter()
            .position(|&m| m == metric)
            .ok_or_else(|| MetricError::Unknown(metric.to_string()).into())
    }

    /// Mean and standard deviation across runs of each model's mean.
    pub fn summary(&self, metric: MetricSpec) -> Result<Vec<(String, RunSummary)>, RankingError> {
        let k = self.metric_index(metric)?;
        Ok(self
            .models
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let xs: Vec<f64> = self.run_means.iter().map(|run| run[j][k]).collect();
                let mean = pairwise_sum(&xs) / xs.len() as f64;
                (
                    name.clone(),
                    RunSummary {
                        mean,
                        std: std_dev(&xs),
                    },
                )
            })
            .collect())
    }

    /// Ranking by the mean over runs.
    pub fn ranking(&self, metric: MetricSpec) -> Result<ModelRanking, RankingError> {
        let means: Vec<(String, f64)> = self.summary(metric)?.into_iter().map(|(m, s)| (m, s.mean)).collect();
        rank_models(&means, metric, self.spec.clone())
    }
}

/// Runs `runs` independent sampled evaluations; run `r` draws under
/// `derive_seed(spec.seed, r)`.
pub fn repeated_sampled_evaluation(
    models: &[&dyn ScoreFunction],
    instances: &[EvaluationInstance],
    num_items: usize,
    spec: &TargetSetSpec,
    counts: &[u64],
    runs: usize,
    metrics: &[MetricSpec],
) -> Result<RepeatedEvaluation, RankingError> {
    if !spec.strategy.is_sampled() {
        return Err(RankingError::FullStrategy);
    }
    if runs == 0 {
        return Err(RankingError::ZeroRuns);
    }
    let mut run_seeds = Vec::with_capacity(runs);
    let mut run_means = Vec::with_capacity(runs);
    for r in 0..runs {
        let seed = derive_seed(spec.seed, r as u64);
        let run = evaluate_models(models, instances, num_items, spec, counts, seed)?;
        let means = run
            .models
            .iter()
            .map(|m| metrics.iter().map(|&k| m.mean(k)).collect::<Result<Vec<f64>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        run_seeds.push(seed);
        run_means.push(means);
    }
    Ok(RepeatedEvaluation {
        spec: spec.clone(),
        metrics: metrics.to_vec(),
        models: models.iter().map(|m| m.name().to_string()).collect(),
        run_seeds,
        run_means,
    })
}

/// A sweep point: a sample size, or the whole catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepEta {
    Fixed(usize),
    Full,
}

impl fmt::Display for SweepEta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepEta::Fixed(n) => write!(f, "{n}"),
            SweepEta::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for SweepEta {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(SweepEta::Full);
        }
        s.parse::<usize>()
            .map(SweepEta::Fixed)
            .map_err(|_| format!("sample size `{s}` is neither a number nor `full`"))
    }
}

impl Serialize for SweepEta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SweepEta::Fixed(n) => s.serialize_u64(*n as u64),
            SweepEta::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for SweepEta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(SweepEta::Fixed(n as usize)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `{100, 500, 1000, 2500, 5000, 10000, |I|/2}` restricted to sizes that
/// fit the catalog, ascending, then `Full`.
pub fn default_eta_grid(num_items: usize) -> Vec<SweepEta> {
    let mut sizes: Vec<usize> = [100, 500, 1000, 2500, 5000, 10000, num_items / 2]
        .into_iter()
        .filter(|&e| e >= 1 && e <= num_items)
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes.into_iter().map(SweepEta::Fixed).chain([SweepEta::Full]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eta: SweepEta,
    /// Sample size actually used after clamping; `None` for `Full`.
    pub effective_eta: Option<usize>,
    pub clamped: bool,
    pub ranking: ModelRanking,
    pub tau_vs_full: TauResult,
    pub consistent_with_full: bool,
    /// Per-run means `[run][model]` backing the ranking.
    pub run_means: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub strategy: Strategy,
    pub metric: MetricSpec,
    pub full: ModelRanking,
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub strategy: Strategy,
    pub etas: Vec<SweepEta>,
    pub metric: MetricSpec,
    pub runs: usize,
    pub seed: u64,
}

/// One ranking per sample size, each averaged over `runs` runs, compared
/// with the full ranking. `Full` reuses the full evaluation itself.
pub fn sample_size_sweep(
    models: &[&dyn ScoreFunction],
    instances: &[EvaluationInstance],
    num_items: usize,
    counts: &[u64],
    config: &SweepConfig,
) -> Result<SweepResult, RankingError> {
    if config.etas.contains(&SweepEta::Fixed(0)) {
        return Err(RankingError::ZeroEta);
    }
    let full_run = evaluate(models, instances, num_items, &TargetSetSpec::full(), counts)?;
    let full = full_run.ranking(config.metric)?;
    let full_means: Vec<f64> = full_run
        .models
        .iter()
        .map(|m| m.mean(config.metric))
        .collect::<Result<_, _>>()?;
    let mut points = Vec::with_capacity(config.etas.len());
    for &eta in &config.etas {
        let point = match eta {
            SweepEta::Full => SweepPoint {
                eta,
                effective_eta: None,
                clamped: false,
                tau_vs_full: kendall_tau_a(&full, &full)?,
                consistent_with_full: true,
                ranking: full.clone(),
                run_means: vec![full_means.clone()],
            },
            SweepEta::Fixed(requested) if config.strategy.is_sampled() => {
                let clamped = requested > num_items;
                if clamped {
                    log::warn!("sample size {requested} exceeds the catalog of {num_items}; clamped");
                }
                let size = requested.min(num_items);
                let spec = TargetSetSpec::sampled(config.strategy, size, derive_seed(config.seed, size as u64));
                let rep = repeated_sampled_evaluation(
                    models,
                    instances,
                    num_items,
                    &spec,
                    counts,
                    config.runs,
                    &[config.metric],
                )?;
                let ranking = rep.ranking(config.metric)?;
                SweepPoint {
                    eta,
                    effective_eta: Some(size),
                    clamped,
                    tau_vs_full: kendall_tau_a(&ranking, &full)?,
                    consistent_with_full: consistency(&ranking, &full)?.consistent,
                    ranking,
                    run_means: rep
                        .run_means
                        .iter()
                        .map(|run| run.iter().map(|m| m[0]).collect())
                        .collect(),
                }
            }
            SweepEta::Fixed(_) => return Err(RankingError::FullStrategy),
        };
        points.push(point);
    }
    Ok(SweepResult {
        strategy: config.strategy,
        metric: config.metric,
        full,
        points,
    })
}
