//! Experiment configuration, read from TOML with one section per model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::dataset::{ColumnFormat, FilterMode, PopularitySource, PreprocessOptions};
use crate::metrics::MetricSpec;
use crate::models::{ModelConfig, TrainConfig};
use crate::ranking::SweepEta;
use crate::targetset::{Strategy, TargetSetSpec, ZeroCountPolicy};

/// Where the interaction data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A raw interaction log, filtered into a k-core.
    File {
        path: PathBuf,
        /// `tsv`, `csv` or `movielens`.
        #[serde(default = "default_format")]
        format: String,
        #[serde(default = "default_min_count")]
        min_count: usize,
        #[serde(default)]
        skip_filtering: bool,
        #[serde(default)]
        filter_mode: FilterMode,
    },
    /// User `u` walks the item cycle starting at `u mod items`.
    Cycle { items: usize, users: usize, length: usize },
    /// Distinct items per user drawn from a Zipf profile.
    Zipf {
        items: usize,
        users: usize,
        length: usize,
        #[serde(default = "default_exponent")]
        exponent: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_format() -> String {
    "tsv".into()
}

fn default_min_count() -> usize {
    5
}

fn default_exponent() -> f64 {
    1.0
}

impl DatasetConfig {
    pub fn label(&self) -> String {
        match self {
            DatasetConfig::File { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "file".into()),
            DatasetConfig::Cycle { .. } => "cycle".into(),
            DatasetConfig::Zipf { .. } => "zipf".into(),
        }
    }

    pub(crate) fn column_format(format: &str) -> Result<ColumnFormat, HarnessError> {
        ColumnFormat::preset(format).ok_or_else(|| HarnessError::Config(format!("unknown log format `{format}`")))
    }

    pub(crate) fn preprocess_options(&self) -> Option<PreprocessOptions> {
        match self {
            DatasetConfig::File {
                min_count,
                skip_filtering,
                filter_mode,
                ..
            } => Some(PreprocessOptions {
                min_count: *min_count,
                skip_filtering: *skip_filtering,
                mode: *filter_mode,
            }),
            _ => None,
        }
    }
}

/// Which leave-one-out instances the reported rankings use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationSplit {
    #[default]
    Test,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `0` disables early stopping.
    pub patience: usize,
    /// Target sets for validation during model selection.
    pub validation_strategy: Strategy,
    pub validation_eta: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patience: t.patience.unwrap_or(0),
            validation_strategy: Strategy::Full,
            validation_eta: 100,
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        let validation = match self.validation_strategy {
            Strategy::Full => TargetSetSpec::full(),
            s => TargetSetSpec::sampled(s, self.validation_eta, seed),
        };
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: (self.patience > 0).then_some(self.patience),
            seed,
            validation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfigSection {
    pub strategy: Strategy,
    /// Sample sizes, `"full"` allowed; empty means the default grid.
    pub etas: Vec<SweepEta>,
    pub metric: MetricSpec,
    /// Runs per sample size; `0` means the experiment's run count.
    pub runs: usize,
}

impl Default for SweepConfigSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Uniform,
            etas: Vec::new(),
            metric: MetricSpec::hr(10),
            runs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricSpec>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_eta")]
    pub eta: usize,
    #[serde(default)]
    pub split: EvaluationSplit,
    #[serde(default)]
    pub popularity_source: PopularitySource,
    #[serde(default)]
    pub zero_counts: ZeroCountPolicy,
    #[serde(default)]
    pub exclude_seen_in_full: bool,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfigSection>,
    pub models: BTreeMap<String, ModelConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_runs() -> usize {
    20
}

fn default_metrics() -> Vec<MetricSpec> {
    vec![MetricSpec::hr(10), MetricSpec::ndcg(10)]
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Full, Strategy::Uniform, Strategy::Popularity]
}

fn default_eta() -> usize {
    100
}

/// Hex SHA-256 of a value's JSON form.
pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; a relative dataset path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let DatasetConfig::File { path: data, .. } = &mut config.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.models.len() < 2 {
            return fail(format!(
                "rankings need at least 2 models, {} configured",
                self.models.len()
            ));
        }
        if let Some(name) = self.models.keys().find(|n| n.trim().is_empty() || n.contains(',')) {
            return fail(format!("invalid model name `{name}`"));
        }
        if self.metrics.is_empty() {
            return fail("metric list is empty".into());
        }
        if self.strategies.is_empty() {
            return fail("strategy list is empty".into());
        }
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.strategies.iter().any(|s| s.is_sampled()) && self.eta == 0 {
            return fail("sampled strategies need eta >= 1".into());
        }
        match &self.dataset {
            DatasetConfig::File { format, .. } => {
                DatasetConfig::column_format(format)?;
            }
            DatasetConfig::Cycle { items, users, length }
            | DatasetConfig::Zipf {
                items, users, length, ..
            } => {
                if *items == 0 || *users == 0 || *length < 3 {
                    return fail("synthetic datasets need items, users and length >= 3".into());
                }
                if matches!(self.dataset, DatasetConfig::Zipf { .. }) && length > items {
                    return fail(format!("cannot draw {length} distinct items from {items}"));
                }
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return fail("training needs batch_size >= 1 and a positive learning rate".into());
        }
        if t.validation_strategy.is_sampled() && t.validation_eta == 0 {
            return fail("sampled validation needs validation_eta >= 1".into());
        }
        if let Some(s) = &self.sweep {
            if !s.strategy.is_sampled() {
                return fail("sweep strategy must be uniform or popularity".into());
            }
            if s.etas.contains(&SweepEta::Fixed(0)) {
                return fail("sweep sample sizes must be positive".into());
            }
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output directory is
    /// left out.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hash_json(&c)
    }

    pub fn dataset_hash(&self) -> String {
        hash_json(&self.dataset)
    }

    pub fn sweep_runs(&self) -> usize {
        match &self.sweep {
            Some(s) if s.runs > 0 => s.runs,
            _ => self.runs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;

    const TOY: &str = r#"
name = "toy"
seed = 7
runs = 3
eta = 5

[dataset]
source = "cycle"
items = 20
users = 40
length = 8

[training]
max_epochs = 2
batch_size = 16

[models.gru]
architecture = "gru"
embedding_size = 8
hidden_size = 8

[models.pop]
architecture = "popularity"
"#;

    #[test]
    fn parses_sections_and_defaults() {
        let c = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(c.models.len(), 2);
        assert_eq!(c.models["gru"].architecture(), Architecture::Gru);
        assert_eq!(c.models["pop"], ModelConfig::Popularity);
        assert_eq!(c.metrics, default_metrics());
        assert_eq!(c.strategies.len(), 3);
        assert_eq!(c.training.learning_rate, 1e-3);
        assert!(c.sweep.is_none());
    }

    #[test]
    fn unknown_architecture_is_a_config_error() {
        let bad = TOY.replace("architecture = \"popularity\"", "architecture = \"caser\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = TOY.replace("runs = 3", "runs = 3\nrunz = 4");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml(&TOY.replace("runs = 3", "runs = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&TOY.replace("eta = 5", "eta = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&TOY.replace("length = 8", "length = 2")).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::from_toml(TOY).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.dataset_hash(), b.dataset_hash());
    }

    #[test]
    fn sweep_section_accepts_full_sentinel() {
        let text = format!("{TOY}\n[sweep]\netas = [2, 5, \"full\"]\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(
            c.sweep.unwrap().etas,
            vec![SweepEta::Fixed(2), SweepEta::Fixed(5), SweepEta::Full]
        );
    }
}
