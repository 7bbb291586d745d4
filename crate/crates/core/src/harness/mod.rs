//! Experiment orchestration: dataset, training, evaluation, analysis and
//! report emission.
//!
//! Stage outputs live under the output directory, keyed by a hash of the
//! config fields each stage depends on:
//!
//! ```text
//! datasets/<label>-<hash>/      dataset bundle
//! models/<name>-<hash>/         checkpoint, manifest, training history
//! report.json, summary.csv, runs.csv, table.txt, sweep.csv, manifest.json
//! ```
//!
//! A rerun reuses any stage directory whose hash matches, so changing one
//! model's section retrains only that model.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{DatasetConfig, EvaluationSplit, ExperimentConfig, SweepConfigSection, TrainingConfig};
pub use report::{
    emit_reports, runs_csv, summary_csv, sweep_csv, text_table, EmitManifest, ManifestEntry, MetricResult,
    ModelSummary, Provenance, RankingReport, RunValue, StrategyResult, TrainingSummary,
};

use crate::autodiff::{encode_checkpoint, read_checkpoint};
use crate::dataset::{
    self, ingest, load_bundle, popularity_counts, preprocess, save_bundle, LeaveOneOutSplit, SequenceDataset,
};
use crate::models::{
    build_neural, catalog_checksum, fit_baseline, train, EpochRecord, ModelManifest, NeuralModel, ScoreFunction,
};
use crate::ranking::{
    self, consistency, default_eta_grid, kendall_tau_a, repeated_sampled_evaluation, sample_size_sweep, ScoreCache,
    SweepConfig, SweepResult,
};
use crate::rng::derive_seed;
use crate::targetset::{Strategy, TargetSetSpec};
use config::hash_json;

/// Environment variable holding the evaluation worker count.
pub const WORKERS_ENV: &str = "SEQRANK_WORKERS";

/// Score caches are skipped above this many `(prefix, item)` entries.
const SCORE_CACHE_LIMIT: usize = 20_000_000;

const SEED_DERIVATION: &str = "derive_seed(base, k) = splitmix64(splitmix64(base) ^ k * 0xD1B54A32D192ED03); \
    uniform k=1, popularity k=2, sweep k=3; sampled run r uses derive_seed(strategy seed, r); \
    instance i of a run uses ChaCha8 stream i of the run seed; model init uses k = first 8 bytes of sha256(name)";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl HarnessError {
    pub(crate) fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        HarnessError::Stage {
            stage,
            message: err.to_string(),
        }
    }

    pub(crate) fn io(stage: &'static str, path: &Path, err: std::io::Error) -> Self {
        HarnessError::Stage {
            stage,
            message: format!("{}: {err}", path.display()),
        }
    }

    /// 1 for configuration problems, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Stage { .. } => 2,
        }
    }
}

/// Sizes the global evaluation pool from `SEQRANK_WORKERS`, if set.
pub fn configure_workers() -> Result<Option<usize>, HarnessError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Config(format!("{WORKERS_ENV}={raw} is not a positive integer")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::warn!("worker pool already initialized; {WORKERS_ENV} ignored");
    }
    Ok(Some(n))
}

fn short(hash: &str) -> &str {
    &hash[..12]
}

fn name_key(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Writes through a temporary file so an interrupted write never looks
/// like a finished cache entry.
fn write_atomic(path: &Path, body: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, body).map_err(|e| HarnessError::io("io", &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io("io", path, e))
}

/// The dataset with its split and popularity counts.
pub struct PreparedData {
    pub dataset: SequenceDataset,
    pub split: LeaveOneOutSplit,
    pub counts: Vec<u64>,
    pub hash: String,
    pub label: String,
    /// Bundle directory relative to the output directory.
    pub bundle: PathBuf,
}

impl PreparedData {
    pub fn num_items(&self) -> usize {
        self.dataset.num_items()
    }
}

pub fn prepare_dataset(config: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    let hash = config.dataset_hash();
    let label = config.dataset.label();
    let bundle = PathBuf::from("datasets").join(format!("{label}-{}", short(&hash)));
    let dir = config.output_dir.join(&bundle);
    let ds = if dir.join("meta.json").exists() {
        log::info!("reusing dataset bundle {}", dir.display());
        load_bundle(&dir).map_err(|e| HarnessError::stage("preprocess", e))?
    } else {
        let ds = match &config.dataset {
            DatasetConfig::File { path, format, .. } => {
                let format = DatasetConfig::column_format(format)?;
                let log = ingest(path, &format).map_err(|e| HarnessError::stage("preprocess", e))?;
                let options = config.dataset.preprocess_options().expect("file source has options");
                preprocess(&log, &options).map_err(|e| HarnessError::stage("preprocess", e))?
            }
            DatasetConfig::Cycle { items, users, length } => dataset::synthetic::cycle_dataset(*items, *users, *length),
            DatasetConfig::Zipf {
                items,
                users,
                length,
                exponent,
                seed,
            } => dataset::synthetic::zipf_dataset(*items, *users, *length, *exponent, *seed),
        };
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| HarnessError::io("preprocess", &tmp, e))?;
        }
        save_bundle(&ds, &tmp).map_err(|e| HarnessError::stage("preprocess", e))?;
        fs::rename(&tmp, &dir).map_err(|e| HarnessError::io("preprocess", &dir, e))?;
        ds
    };
    let split = dataset::split(&ds).map_err(|e| HarnessError::stage("preprocess", e))?;
    let counts = popularity_counts(&ds, config.popularity_source);
    Ok(PreparedData {
        dataset: ds,
        split,
        counts,
        hash,
        label,
        bundle,
    })
}

#[derive(Serialize, Deserialize)]
struct TrainingRecord {
    summary: TrainingSummary,
    history: Vec<EpochRecord>,
}

/// A fitted or trained scorer ready for evaluation.
pub struct PreparedModel {
    pub name: String,
    pub scorer: Box<dyn ScoreFunction>,
    pub training: Option<TrainingSummary>,
}

/// Trains (or reloads) every neural model and fits the baselines.
pub fn prepare_models(config: &ExperimentConfig, data: &PreparedData) -> Result<Vec<PreparedModel>, HarnessError> {
    let n = data.num_items();
    let catalog = catalog_checksum(&data.dataset);
    let mut out = Vec::with_capacity(config.models.len());
    for (name, model_config) in &config.models {
        if !model_config.architecture().is_neural() {
            let scorer = fit_baseline(model_config, name, n, &data.split.train, &data.counts)
                .map_err(|e| HarnessError::stage("train", e))?;
            out.push(PreparedModel {
                name: name.clone(),
                scorer,
                training: None,
            });
            continue;
        }
        let key = hash_json(&(&data.hash, name, model_config, &config.training, config.seed));
        let rel = PathBuf::from("models").join(format!("{name}-{}", short(&key)));
        let dir = config.output_dir.join(&rel);
        let files = ["manifest.json", "checkpoint.bin", "training.json"].map(|f| dir.join(f));
        let (model, record) = if files.iter().all(|f| f.exists()) {
            log::info!("reusing trained {name} from {}", dir.display());
            load_trained(&files, &catalog)?
        } else {
            fs::create_dir_all(&dir).map_err(|e| HarnessError::io("train", &dir, e))?;
            let init_seed = derive_seed(config.seed, name_key(name));
            let mut model =
                build_neural(model_config, name, n, init_seed).map_err(|e| HarnessError::stage("train", e))?;
            log::info!("training {name} ({} parameters)", model.parameter_count());
            let tc = config.training.to_train_config(derive_seed(init_seed, 1));
            let state = train(
                model.as_mut(),
                &data.split.train,
                &data.split.validation,
                &data.counts,
                &tc,
            )
            .map_err(|e| HarnessError::stage("train", e))?;
            let record = TrainingRecord {
                summary: TrainingSummary {
                    model: name.clone(),
                    architecture: model.architecture().to_string(),
                    parameters: model.parameter_count(),
                    epochs_run: state.epochs_run,
                    best_epoch: state.best_epoch,
                    best_validation_hr10: state.best_hr10,
                    checkpoint: rel.join("checkpoint.bin").to_string_lossy().replace('\\', "/"),
                },
                history: state.history,
            };
            let manifest = ModelManifest::describe(model.as_ref(), &catalog);
            write_atomic(&files[1], &encode_checkpoint(model.params()))?;
            write_atomic(
                &files[0],
                &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
            )?;
            write_atomic(&dir.join("history.csv"), history_csv(&record.history).as_bytes())?;
            write_atomic(
                &files[2],
                &serde_json::to_vec_pretty(&record).expect("record serializes"),
            )?;
            (model, record)
        };
        out.push(PreparedModel {
            name: name.clone(),
            scorer: model,
            training: Some(record.summary),
        });
    }
    Ok(out)
}

fn load_trained(files: &[PathBuf; 3], catalog: &str) -> Result<(Box<dyn NeuralModel>, TrainingRecord), HarnessError> {
    let read = |p: &Path| fs::read(p).map_err(|e| HarnessError::io("train", p, e));
    let manifest: ModelManifest =
        serde_json::from_slice(&read(&files[0])?).map_err(|e| HarnessError::stage("train", e))?;
    let ckpt = read(&files[1])?;
    // Round-trip through the reader to validate the file before use.
    read_checkpoint(ckpt.as_slice()).map_err(|e| HarnessError::stage("train", e))?;
    let model = manifest
        .restore(&ckpt, catalog)
        .map_err(|e| HarnessError::stage("train", e))?;
    let record: TrainingRecord =
        serde_json::from_slice(&read(&files[2])?).map_err(|e| HarnessError::stage("train", e))?;
    Ok((model, record))
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,hr1,hr10,ndcg10\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.hr1, r.hr10, r.ndcg10));
    }
    out
}

fn strategy_seed(base: u64, strategy: Strategy) -> u64 {
    let k = match strategy {
        Strategy::Full => 0,
        Strategy::Uniform => 1,
        Strategy::Popularity => 2,
    };
    derive_seed(base, k)
}

/// Evaluation instances of the configured split.
pub fn instances<'a>(config: &ExperimentConfig, data: &'a PreparedData) -> &'a [dataset::EvaluationInstance] {
    match config.split {
        EvaluationSplit::Test => &data.split.test,
        EvaluationSplit::Validation => &data.split.validation,
    }
}

fn with_cache<'a>(
    models: &'a [PreparedModel],
    instances: &[dataset::EvaluationInstance],
    num_items: usize,
) -> Result<Vec<ScoreCache<'a>>, HarnessError> {
    if instances.len().saturating_mul(num_items) > SCORE_CACHE_LIMIT {
        return Ok(Vec::new());
    }
    models
        .iter()
        .map(|m| {
            ScoreCache::build(m.scorer.as_ref(), instances, num_items).map_err(|e| HarnessError::stage("evaluate", e))
        })
        .collect()
}

/// Per-strategy rankings, tau against full and the raw run values.
pub fn evaluate_strategies(
    config: &ExperimentConfig,
    data: &PreparedData,
    scorers: &[&dyn ScoreFunction],
    warnings: &mut Vec<String>,
) -> Result<(Vec<StrategyResult>, Vec<RunValue>), HarnessError> {
    let stage = |e: ranking::RankingError| HarnessError::stage("evaluate", e);
    let instances = instances(config, data);
    let n = data.num_items();
    let mut order: Vec<Strategy> = Vec::new();
    for &s in &config.strategies {
        if !order.contains(&s) {
            order.push(s);
        }
    }
    let mut results = Vec::new();
    let mut run_values = Vec::new();
    for strategy in order {
        let mut push_run = |run: usize, run_seed: u64, eta: Option<usize>, means: &[Vec<f64>]| {
            for (j, scorer) in scorers.iter().enumerate() {
                for (k, &metric) in config.metrics.iter().enumerate() {
                    run_values.push(RunValue {
                        strategy,
                        eta,
                        run,
                        run_seed,
                        model: scorer.name().to_string(),
                        metric,
                        value: means[j][k],
                    });
                }
            }
        };
        let (eta, runs, metrics) = if strategy.is_sampled() {
            let spec = TargetSetSpec {
                zero_counts: config.zero_counts,
                ..TargetSetSpec::sampled(strategy, config.eta, strategy_seed(config.seed, strategy))
            };
            let rep =
                repeated_sampled_evaluation(scorers, instances, n, &spec, &data.counts, config.runs, &config.metrics)
                    .map_err(stage)?;
            for (r, (&seed, means)) in rep.run_seeds.iter().zip(&rep.run_means).enumerate() {
                push_run(r, seed, Some(config.eta), means);
            }
            let metrics = config
                .metrics
                .iter()
                .map(|&metric| {
                    let summaries = rep
                        .summary(metric)?
                        .into_iter()
                        .map(|(model, s)| ModelSummary {
                            model,
                            mean: s.mean,
                            std: s.std,
                        })
                        .collect();
                    Ok(MetricResult {
                        metric,
                        summaries,
                        ranking: rep.ranking(metric)?,
                        tau_vs_full: None,
                        consistency: None,
                    })
                })
                .collect::<Result<Vec<_>, ranking::RankingError>>()
                .map_err(stage)?;
            (Some(config.eta), config.runs, metrics)
        } else {
            let spec = TargetSetSpec {
                exclude_seen_in_full: config.exclude_seen_in_full,
                ..TargetSetSpec::full()
            };
            let run = ranking::evaluate(scorers, instances, n, &spec, &data.counts).map_err(stage)?;
            let means: Vec<Vec<f64>> = run
                .models
                .iter()
                .map(|m| config.metrics.iter().map(|&k| m.mean(k)).collect::<Result<_, _>>())
                .collect::<Result<_, _>>()
                .map_err(stage)?;
            push_run(0, run.run_seed, None, &means);
            let metrics = config
                .metrics
                .iter()
                .enumerate()
                .map(|(k, &metric)| {
                    Ok(MetricResult {
                        metric,
                        summaries: run
                            .models
                            .iter()
                            .enumerate()
                            .map(|(j, m)| ModelSummary {
                                model: m.model.clone(),
                                mean: means[j][k],
                                std: 0.0,
                            })
                            .collect(),
                        ranking: run.ranking(metric)?,
                        tau_vs_full: None,
                        consistency: None,
                    })
                })
                .collect::<Result<Vec<_>, ranking::RankingError>>()
                .map_err(stage)?;
            (None, 1, metrics)
        };
        for m in &metrics {
            if let Some(w) = &m.ranking.tie_warning {
                warnings.push(format!("{} {}: {w}", strategy.name(), m.metric));
            }
        }
        results.push(StrategyResult {
            strategy,
            eta,
            runs,
            metrics,
        });
    }
    let full: Option<Vec<MetricResult>> = results
        .iter()
        .find(|r| r.strategy == Strategy::Full)
        .map(|r| r.metrics.clone());
    if let Some(full) = full {
        for r in results.iter_mut().filter(|r| r.strategy.is_sampled()) {
            for m in &mut r.metrics {
                let f = full.iter().find(|f| f.metric == m.metric).expect("same metric list");
                m.tau_vs_full = Some(kendall_tau_a(&m.ranking, &f.ranking).map_err(stage)?);
                m.consistency = Some(consistency(&m.ranking, &f.ranking).map_err(stage)?);
            }
        }
    }
    Ok((results, run_values))
}

/// Whether to run the sample-size sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SweepMode {
    /// Only with a `[sweep]` section.
    #[default]
    AsConfigured,
    /// Always; the default grid and settings fill in a missing section.
    Force,
    Skip,
}

pub fn run_sweep(
    config: &ExperimentConfig,
    data: &PreparedData,
    scorers: &[&dyn ScoreFunction],
) -> Result<SweepResult, HarnessError> {
    let section = config.sweep.clone().unwrap_or_default();
    let etas = if section.etas.is_empty() {
        default_eta_grid(data.num_items())
    } else {
        section.etas.clone()
    };
    let sweep = SweepConfig {
        strategy: section.strategy,
        etas,
        metric: section.metric,
        runs: config.sweep_runs(),
        seed: derive_seed(config.seed, 3),
    };
    sample_size_sweep(scorers, instances(config, data), data.num_items(), &data.counts, &sweep)
        .map_err(|e| HarnessError::stage("sweep", e))
}

/// Runs every stage and writes the reports into the output directory.
pub fn run_experiment(config: &ExperimentConfig, sweep: SweepMode) -> Result<RankingReport, HarnessError> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| HarnessError::io("preprocess", &config.output_dir, e))?;
    let data = prepare_dataset(config)?;
    let models = prepare_models(config, &data)?;
    let caches = with_cache(&models, instances(config, &data), data.num_items())?;
    let scorers: Vec<&dyn ScoreFunction> = if caches.is_empty() {
        models.iter().map(|m| m.scorer.as_ref()).collect()
    } else {
        caches.iter().map(|c| c as &dyn ScoreFunction).collect()
    };
    let mut warnings = data.dataset.meta.warnings.clone();
    let (results, run_values) = evaluate_strategies(config, &data, &scorers, &mut warnings)?;
    let sweep = match (sweep, &config.sweep) {
        (SweepMode::Force, _) | (SweepMode::AsConfigured, Some(_)) => Some(run_sweep(config, &data, &scorers)?),
        _ => None,
    };
    if let Some(s) = &sweep {
        warnings.extend(
            s.points
                .iter()
                .filter(|p| p.clamped)
                .map(|p| format!("sweep size {} clamped to the catalog", p.eta)),
        );
    }
    let report = RankingReport {
        experiment: config.name.clone(),
        dataset: data.label.clone(),
        dataset_stats: data.dataset.stats(),
        split: match config.split {
            EvaluationSplit::Test => "test".into(),
            EvaluationSplit::Validation => "validation".into(),
        },
        models: models.iter().map(|m| m.name.clone()).collect(),
        training: models.iter().filter_map(|m| m.training.clone()).collect(),
        results,
        run_values,
        sweep,
        warnings,
        provenance: Provenance {
            config_hash: config.config_hash(),
            dataset_hash: data.hash.clone(),
            base_seed: config.seed,
            seed_derivation: SEED_DERIVATION.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
        },
    };
    report.check_taus()?;
    emit_reports(&report, &config.output_dir)?;
    Ok(report)
}
