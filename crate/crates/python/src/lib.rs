//! Python bindings: metrics, Kendall's Tau-a, target sets, datasets,
//! scorers, evaluation, sweeps and the experiment harness.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use seqrank::dataset::{self, ColumnFormat, EvaluationInstance, PreprocessOptions, SequenceDataset};
use seqrank::harness::{self, ExperimentConfig, HarnessError, SweepMode};
use seqrank::metrics::{self, MetricSpec, RankedList};
use seqrank::models::synthetic::TableScorer;
use seqrank::models::{
    build_neural, train, MarkovScorer, ModelConfig, ModelError, PopularityScorer, ScoreFunction, TrainConfig,
};
use seqrank::ranking::{self, ModelRanking, SweepConfig, SweepEta};
use seqrank::rng::rng_from_seed;
use seqrank::targetset::{self, Strategy, TargetSetSpec};

fn value_error(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_error(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) => value_error(e),
        HarnessError::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: Display,
{
    s.parse().map_err(value_error)
}

fn ranked(ranking: Vec<usize>) -> PyResult<RankedList> {
    RankedList::new(ranking).map_err(value_error)
}

#[pyfunction]
fn hit_rate_at_k(ranking: Vec<usize>, relevant: usize, k: usize) -> PyResult<f64> {
    metrics::hit_rate_at_k(&ranked(ranking)?, relevant, k).map_err(value_error)
}

#[pyfunction]
fn ndcg_at_k(ranking: Vec<usize>, relevant: usize, k: usize) -> PyResult<f64> {
    metrics::ndcg_at_k(&ranked(ranking)?, relevant, k).map_err(value_error)
}

/// Kendall's Tau-a between two rankings of the same models.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Tau {
    concordant: usize,
    discordant: usize,
    numerator: i64,
    denominator: i64,
    tau: f64,
}

#[pymethods]
impl Tau {
    fn __repr__(&self) -> String {
        format!("Tau({}/{} = {:.4})", self.numerator, self.denominator, self.tau)
    }
}

impl From<ranking::TauResult> for Tau {
    fn from(t: ranking::TauResult) -> Self {
        let (numerator, denominator) = t.reduced();
        Self {
            concordant: t.concordant,
            discordant: t.discordant,
            numerator,
            denominator,
            tau: t.tau,
        }
    }
}

fn rank_vector(models: &[String], ranks: &[usize]) -> PyResult<ModelRanking> {
    if models.len() != ranks.len() {
        return Err(value_error("models and ranks differ in length"));
    }
    let pairs: Vec<(&str, usize)> = models.iter().map(String::as_str).zip(ranks.iter().copied()).collect();
    ranking::from_ranks(&pairs, MetricSpec::hr(10), TargetSetSpec::full()).map_err(value_error)
}

/// Tau-a of two rank vectors (1 = best) over `models`.
#[pyfunction]
fn kendall_tau(models: Vec<String>, first: Vec<usize>, second: Vec<usize>) -> PyResult<Tau> {
    let (a, b) = (rank_vector(&models, &first)?, rank_vector(&models, &second)?);
    Ok(ranking::kendall_tau_a(&a, &b).map_err(value_error)?.into())
}

/// True iff every model holds the same rank in both vectors.
#[pyfunction]
fn consistent(models: Vec<String>, first: Vec<usize>, second: Vec<usize>) -> PyResult<bool> {
    let (a, b) = (rank_vector(&models, &first)?, rank_vector(&models, &second)?);
    Ok(ranking::consistency(&a, &b).map_err(value_error)?.consistent)
}

/// Ranks by descending mean; exact ties go to the lexicographically
/// smaller name.
#[pyfunction]
fn rank_models(means: Vec<(String, f64)>) -> PyResult<Vec<(String, usize)>> {
    let r = ranking::rank_models(&means, MetricSpec::hr(10), TargetSetSpec::full()).map_err(value_error)?;
    Ok(r.entries.into_iter().map(|e| (e.model, e.rank)).collect())
}

/// One evaluation instance: a user's prefix and the held-out item.
#[pyclass(frozen, get_all, from_py_object)]
#[derive(Clone)]
struct Instance {
    user: usize,
    prefix: Vec<usize>,
    relevant: usize,
}

#[pymethods]
impl Instance {
    #[new]
    fn new(user: usize, prefix: Vec<usize>, relevant: usize) -> Self {
        Self { user, prefix, relevant }
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance(user={}, prefix={:?}, relevant={})",
            self.user, self.prefix, self.relevant
        )
    }
}

impl Instance {
    fn core(&self) -> EvaluationInstance {
        EvaluationInstance::new(self.user, self.prefix.clone(), self.relevant)
    }

    fn wrap(i: &EvaluationInstance) -> Self {
        Self {
            user: i.user,
            prefix: i.prefix.clone(),
            relevant: i.relevant,
        }
    }
}

fn core_instances(instances: &[Instance]) -> Vec<EvaluationInstance> {
    instances.iter().map(Instance::core).collect()
}

fn spec(strategy: &str, eta: usize, seed: u64) -> PyResult<TargetSetSpec> {
    let strategy: Strategy = parse(strategy)?;
    Ok(match strategy {
        Strategy::Full => TargetSetSpec::full(),
        s => TargetSetSpec::sampled(s, eta, seed),
    })
}

/// Candidate items (negatives then the relevant item) for one instance.
#[pyfunction]
#[pyo3(signature = (instance, num_items, strategy = "uniform", eta = 100, seed = 0, counts = None))]
fn target_set(
    instance: &Instance,
    num_items: usize,
    strategy: &str,
    eta: usize,
    seed: u64,
    counts: Option<Vec<u64>>,
) -> PyResult<Vec<usize>> {
    let spec = spec(strategy, eta, seed)?;
    let counts = counts.unwrap_or_default();
    let set =
        targetset::build(&instance.core(), num_items, &spec, &counts, &mut rng_from_seed(seed)).map_err(value_error)?;
    Ok(set.candidates)
}

/// Per-user item sequences over a dense item vocabulary.
#[pyclass(frozen)]
struct Dataset {
    inner: SequenceDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn from_sequences(num_items: usize, sequences: Vec<Vec<usize>>) -> PyResult<Self> {
        if let Some(&item) = sequences.iter().flatten().find(|&&i| i >= num_items) {
            return Err(value_error(format!("item {item} outside a catalog of {num_items}")));
        }
        Ok(Self {
            inner: SequenceDataset::from_sequences(num_items, sequences),
        })
    }

    /// User `u` walks `u, u+1, ...` modulo `items`.
    #[staticmethod]
    fn cycle(items: usize, users: usize, length: usize) -> Self {
        Self {
            inner: dataset::synthetic::cycle_dataset(items, users, length),
        }
    }

    /// Items drawn from a Zipf profile; item 0 is the most popular.
    #[staticmethod]
    #[pyo3(signature = (items, users, length, exponent = 1.0, seed = 0))]
    fn zipf(items: usize, users: usize, length: usize, exponent: f64, seed: u64) -> Self {
        Self {
            inner: dataset::synthetic::zipf_dataset(items, users, length, exponent, seed),
        }
    }

    /// Reads a delimited interaction log and applies k-core filtering.
    /// `format` is `tsv`, `csv` or `movielens`.
    #[staticmethod]
    #[pyo3(signature = (path, format = "tsv", min_count = 5))]
    fn from_file(path: PathBuf, format: &str, min_count: usize) -> PyResult<Self> {
        let format = ColumnFormat::preset(format).ok_or_else(|| value_error(format!("unknown format `{format}`")))?;
        let log = dataset::ingest(&path, &format).map_err(value_error)?;
        let options = PreprocessOptions {
            min_count,
            ..PreprocessOptions::default()
        };
        Ok(Self {
            inner: dataset::preprocess(&log, &options).map_err(value_error)?,
        })
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn sequences(&self) -> Vec<Vec<usize>> {
        self.inner.sequences.clone()
    }

    /// Occurrences of each item over all sequences.
    #[getter]
    fn popularity(&self) -> Vec<u64> {
        self.inner.popularity.clone()
    }

    fn stats(&self) -> BTreeMap<&'static str, f64> {
        let s = self.inner.stats();
        BTreeMap::from([
            ("users", s.users as f64),
            ("items", s.items as f64),
            ("actions", s.actions as f64),
            ("avg_length", s.avg_length),
            ("density", s.density),
        ])
    }

    /// Leave-one-out split.
    fn split(&self) -> PyResult<Split> {
        let sp = dataset::split(&self.inner).map_err(value_error)?;
        Ok(Split {
            train: sp.train,
            validation: sp.validation.iter().map(Instance::wrap).collect(),
            test: sp.test.iter().map(Instance::wrap).collect(),
        })
    }
}

/// Training sequences plus validation and test instances.
#[pyclass(frozen, get_all)]
struct Split {
    train: Vec<Vec<usize>>,
    validation: Vec<Instance>,
    test: Vec<Instance>,
}

/// A Python callable `f(prefix, candidates) -> scores` used as a scorer.
struct PyCallableScorer {
    name: String,
    func: Py<PyAny>,
}

impl ScoreFunction for PyCallableScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        Python::attach(|py| {
            self.func
                .call1(py, (prefix.to_vec(), candidates.to_vec()))
                .and_then(|out| out.extract::<Vec<f64>>(py))
                .map_err(|e| ModelError::InvalidConfig(format!("{}: {e}", self.name)))
        })
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

/// A fitted, trained or wrapped score function.
#[pyclass(frozen)]
struct Scorer {
    inner: Arc<dyn ScoreFunction>,
    /// Epoch-level validation HR@10 when trained here.
    history: Vec<f64>,
}

impl Scorer {
    fn wrap(inner: Arc<dyn ScoreFunction>) -> Self {
        Self {
            inner,
            history: Vec::new(),
        }
    }
}

#[pymethods]
impl Scorer {
    /// Scores every item by its count.
    #[staticmethod]
    fn popularity(name: &str, counts: Vec<u64>) -> PyResult<Self> {
        Ok(Self::wrap(Arc::new(
            PopularityScorer::new(name, counts).map_err(value_error)?,
        )))
    }

    /// First-order transition counts with add-one smoothing.
    #[staticmethod]
    fn markov(name: &str, num_items: usize, train: Vec<Vec<usize>>) -> PyResult<Self> {
        Ok(Self::wrap(Arc::new(
            MarkovScorer::fit(name, num_items, &train).map_err(value_error)?,
        )))
    }

    /// Fixed pseudo-random scores keyed by `(seed, prefix, item)`.
    #[staticmethod]
    fn hashed(name: &str, num_items: usize, seed: u64) -> Self {
        Self::wrap(Arc::new(TableScorer::hashed(name, num_items, seed)))
    }

    /// Wraps `func(prefix, candidates) -> list[float]`.
    #[staticmethod]
    fn from_callable(name: &str, func: Py<PyAny>) -> Self {
        Self::wrap(Arc::new(PyCallableScorer {
            name: name.to_string(),
            func,
        }))
    }

    /// Trains a neural model. `config_json` is a JSON object with an
    /// `architecture` key (`gru`, `narm`, `sasrec`, `bert4rec`) and any
    /// hyperparameters to override.
    #[staticmethod]
    #[pyo3(signature = (
        name, config_json, num_items, train_sequences, validation,
        max_epochs = 50, batch_size = 128, learning_rate = 1e-3, patience = None, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        name: &str,
        config_json: &str,
        num_items: usize,
        train_sequences: Vec<Vec<usize>>,
        validation: Vec<Instance>,
        max_epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        patience: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let config: ModelConfig = serde_json::from_str(config_json).map_err(value_error)?;
        if !config.architecture().is_neural() {
            return Err(value_error(format!(
                "{} is not a neural architecture",
                config.architecture()
            )));
        }
        let validation = core_instances(&validation);
        let tc = TrainConfig {
            max_epochs,
            batch_size,
            learning_rate,
            patience,
            seed,
            ..TrainConfig::default()
        };
        let (model, state) = py
            .detach(|| {
                let mut model = build_neural(&config, name, num_items, seed)?;
                let state = train(model.as_mut(), &train_sequences, &validation, &[], &tc)?;
                Ok::<_, ModelError>((model, state))
            })
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let inner: Arc<dyn seqrank::models::NeuralModel> = Arc::from(model);
        Ok(Self {
            inner,
            history: state.history.iter().map(|r| r.hr10).collect(),
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn validation_hr10(&self) -> Vec<f64> {
        self.history.clone()
    }

    fn score(&self, prefix: Vec<usize>, candidates: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.score(&prefix, &candidates).map_err(value_error)
    }

    fn __repr__(&self) -> String {
        format!("Scorer({:?})", self.inner.name())
    }
}

fn scorer_list(scorers: &[Bound<'_, PyAny>]) -> PyResult<Vec<Arc<dyn ScoreFunction>>> {
    scorers
        .iter()
        .map(|s| match s.cast::<Scorer>() {
            Ok(s) => Ok(Arc::clone(&s.get().inner)),
            Err(_) if s.is_callable() => {
                let name: String = s.getattr("__name__")?.extract()?;
                Ok(Arc::new(PyCallableScorer {
                    name,
                    func: s.clone().unbind(),
                }) as Arc<dyn ScoreFunction>)
            }
            Err(_) => Err(value_error("scorers must be Scorer objects or callables")),
        })
        .collect()
}

fn owned_ranks(r: &ModelRanking) -> BTreeMap<String, usize> {
    r.entries.iter().map(|e| (e.model.clone(), e.rank)).collect()
}

/// Means, spreads and ranks of one evaluation, keyed by metric then model.
#[pyclass(frozen, get_all)]
struct Evaluation {
    strategy: String,
    runs: usize,
    means: BTreeMap<String, BTreeMap<String, f64>>,
    std: BTreeMap<String, BTreeMap<String, f64>>,
    ranks: BTreeMap<String, BTreeMap<String, usize>>,
    warnings: Vec<String>,
}

/// Scores every model on shared target sets. Sampled strategies repeat
/// `runs` times; run `r` draws under a seed derived from `(seed, r)`.
#[pyfunction]
#[pyo3(signature = (
    scorers, instances, num_items, strategy = "full", eta = 100, seed = 0,
    counts = None, metrics = vec!["HR@10".to_string(), "NDCG@10".to_string()], runs = 1
))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    scorers: Vec<Bound<'_, PyAny>>,
    instances: Vec<Instance>,
    num_items: usize,
    strategy: &str,
    eta: usize,
    seed: u64,
    counts: Option<Vec<u64>>,
    metrics: Vec<String>,
    runs: usize,
) -> PyResult<Evaluation> {
    let spec = spec(strategy, eta, seed)?;
    let metrics: Vec<MetricSpec> = metrics.iter().map(|m| parse(m)).collect::<PyResult<_>>()?;
    let models = scorer_list(&scorers)?;
    let instances = core_instances(&instances);
    let counts = counts.unwrap_or_default();
    let runs = if spec.strategy == Strategy::Full { 1 } else { runs };
    // Per metric: (model, mean, std) and the ranking of the means.
    let results = py
        .detach(|| {
            let refs: Vec<&dyn ScoreFunction> = models.iter().map(|m| m.as_ref()).collect();
            let mut results = Vec::with_capacity(metrics.len());
            if spec.strategy == Strategy::Full {
                let run = ranking::evaluate(&refs, &instances, num_items, &spec, &counts)?;
                for &metric in &metrics {
                    let means = run.means(metric)?;
                    let rows = means.iter().map(|(m, v)| (m.clone(), *v, 0.0)).collect::<Vec<_>>();
                    results.push((metric, rows, run.ranking(metric)?));
                }
            } else {
                let repeated =
                    ranking::repeated_sampled_evaluation(&refs, &instances, num_items, &spec, &counts, runs, &metrics)?;
                for &metric in &metrics {
                    let rows = repeated
                        .summary(metric)?
                        .into_iter()
                        .map(|(m, s)| (m, s.mean, s.std))
                        .collect();
                    results.push((metric, rows, repeated.ranking(metric)?));
                }
            }
            Ok::<_, ranking::RankingError>(results)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut out = Evaluation {
        strategy: spec.strategy.name().to_string(),
        runs,
        means: BTreeMap::new(),
        std: BTreeMap::new(),
        ranks: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (metric, rows, ranking) in results {
        let key = metric.to_string();
        out.means
            .insert(key.clone(), rows.iter().map(|(m, v, _)| (m.clone(), *v)).collect());
        out.std
            .insert(key.clone(), rows.iter().map(|(m, _, s)| (m.clone(), *s)).collect());
        if let Some(w) = &ranking.tie_warning {
            out.warnings.push(format!("{key}: {w}"));
        }
        out.ranks.insert(key, owned_ranks(&ranking));
    }
    Ok(out)
}

/// One sample size of a sweep.
#[pyclass(frozen, get_all)]
struct SweepPoint {
    eta: String,
    effective_eta: Option<usize>,
    clamped: bool,
    ranks: BTreeMap<String, usize>,
    tau: Tau,
    consistent: bool,
}

/// Rankings at each sample size (`"full"` allowed) against the full one.
#[pyfunction]
#[pyo3(signature = (
    scorers, instances, num_items, etas, strategy = "uniform", metric = "HR@10",
    runs = 5, seed = 0, counts = None
))]
#[allow(clippy::too_many_arguments)]
fn sample_size_sweep(
    py: Python<'_>,
    scorers: Vec<Bound<'_, PyAny>>,
    instances: Vec<Instance>,
    num_items: usize,
    etas: Vec<Bound<'_, PyAny>>,
    strategy: &str,
    metric: &str,
    runs: usize,
    seed: u64,
    counts: Option<Vec<u64>>,
) -> PyResult<Vec<SweepPoint>> {
    let etas: Vec<SweepEta> = etas
        .iter()
        .map(|e| match e.extract::<usize>() {
            Ok(n) => Ok(SweepEta::Fixed(n)),
            Err(_) => parse(&e.str()?.to_cow()?),
        })
        .collect::<PyResult<_>>()?;
    let config = SweepConfig {
        strategy: parse(strategy)?,
        etas,
        metric: parse(metric)?,
        runs,
        seed,
    };
    let models = scorer_list(&scorers)?;
    let instances = core_instances(&instances);
    let counts = counts.unwrap_or_default();
    let result = py
        .detach(|| {
            let refs: Vec<&dyn ScoreFunction> = models.iter().map(|m| m.as_ref()).collect();
            ranking::sample_size_sweep(&refs, &instances, num_items, &counts, &config)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(result
        .points
        .into_iter()
        .map(|p| SweepPoint {
            eta: p.eta.to_string(),
            effective_eta: p.effective_eta,
            clamped: p.clamped,
            ranks: owned_ranks(&p.ranking),
            tau: p.tau_vs_full.into(),
            consistent: p.consistent_with_full,
        })
        .collect())
}

/// Runs a TOML experiment config end to end, writes the reports and
/// returns `report.json` as a string.
#[pyfunction]
#[pyo3(signature = (config_path, output_dir = None, sweep = None))]
fn run_experiment(
    py: Python<'_>,
    config_path: PathBuf,
    output_dir: Option<PathBuf>,
    sweep: Option<bool>,
) -> PyResult<String> {
    let mut config = ExperimentConfig::load(&config_path).map_err(harness_error)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    let mode = match sweep {
        None => SweepMode::AsConfigured,
        Some(true) => SweepMode::Force,
        Some(false) => SweepMode::Skip,
    };
    let report = py
        .detach(|| harness::run_experiment(&config, mode))
        .map_err(harness_error)?;
    Ok(report.to_json())
}

#[pymodule]
fn seqrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hit_rate_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(consistent, m)?)?;
    m.add_function(wrap_pyfunction!(rank_models, m)?)?;
    m.add_function(wrap_pyfunction!(target_set, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_size_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Tau>()?;
    m.add_class::<Instance>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Split>()?;
    m.add_class::<Scorer>()?;
    m.add_class::<Evaluation>()?;
    m.add_class::<SweepPoint>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyCFunction;

    #[test]
    fn tau_of_published_vectors() {
        let models: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let t = kendall_tau(models.clone(), vec![1, 2, 3, 4], vec![3, 4, 2, 1]).unwrap();
        assert_eq!((t.numerator, t.denominator), (-2, 3));
        assert!(!consistent(models, vec![1, 2, 3, 4], vec![1, 2, 4, 3]).unwrap());
    }

    #[test]
    fn python_callable_matches_native_scorer() {
        Python::attach(|py| {
            let ds = Dataset::zipf(30, 40, 6, 1.0, 1);
            let sp = ds.split().unwrap();
            let counts = ds.popularity();
            // Popularity scores as a Python-side callable.
            let table = counts.clone();
            let func = PyCFunction::new_closure(py, Some(c"pop_py"), None, move |args, _| {
                let candidates: Vec<usize> = args.get_item(1)?.extract()?;
                Ok::<_, PyErr>(candidates.iter().map(|&c| table[c] as f64).collect::<Vec<f64>>())
            })
            .unwrap();
            let native = Bound::new(py, Scorer::popularity("pop", counts.clone()).unwrap()).unwrap();
            let scorers = vec![native.into_any(), func.into_any()];
            let out = evaluate(
                py,
                scorers,
                sp.test.clone(),
                30,
                "uniform",
                5,
                3,
                None,
                vec!["HR@10".into()],
                3,
            )
            .unwrap();
            let means = &out.means["HR@10"];
            assert_eq!(means["pop"], means["pop_py"]);
            assert_eq!(out.runs, 3);
        });
    }

    #[test]
    fn bad_inputs_raise() {
        assert!(hit_rate_at_k(vec![1, 1], 1, 1).is_err());
        assert!(spec("sideways", 1, 0).is_err());
        assert!(Dataset::from_sequences(3, vec![vec![0, 5]]).is_err());
    }
}
