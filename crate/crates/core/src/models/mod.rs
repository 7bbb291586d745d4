//! Sequence scorers behind a single [`ScoreFunction`] interface.
//!
//! The neural models build their forward pass on an autodiff [`Graph`];
//! the same code serves scoring (evaluation-mode graph) and training
//! (training-mode graph, dropout active). Row-vector convention
//! throughout: a sequence of `t` items is a `[t, d]` matrix and weights
//! multiply on the right.

mod baselines;
mod bert4rec;
mod gru;
mod narm;
mod sasrec;
pub mod synthetic;
mod train;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, HasParams, Var};
use crate::dataset::SequenceDataset;

pub use baselines::{MarkovScorer, PopularityScorer};
pub use bert4rec::{Bert4Rec, Bert4RecConfig};
pub use gru::{Gru, GruCell, GruConfig};
pub use narm::{AttentionNorm, Narm, NarmConfig};
pub use sasrec::{NegativeExclusion, SasRec, SasRecConfig};
pub use train::{train, EpochRecord, TrainConfig, TrainState};
pub use transformer::{Activation, EncoderConfig, TransformerEncoder};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty prefix: cold-start users cannot be scored")]
    EmptyPrefix,
    #[error("item {item} is outside the catalog of {num_items} items")]
    ItemOutOfRange { item: usize, num_items: usize },
    #[error("masked sequence has no mask token")]
    NoMaskToken,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("model scores contain a non-finite value for item {item}")]
    NonFiniteScore { item: usize },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Encoded parameters of the last state with finite values.
        last_finite: Vec<u8>,
    },
    #[error("model manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can score candidate items given a prefix.
pub trait ScoreFunction: Send + Sync {
    fn name(&self) -> &str;

    /// One finite score per candidate, higher is better.
    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError>;

    fn parameter_count(&self) -> usize;
}

/// Sum over all terms (the literal objective) or mean per term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

/// A scorer with trainable parameters.
pub trait NeuralModel: ScoreFunction + HasParams {
    fn architecture(&self) -> Architecture;

    fn num_items(&self) -> usize;

    /// Scores over the whole catalog for one prefix, shape `[1, num_items]`.
    fn logits(&self, g: &mut Graph<'_>, prefix: &[usize]) -> Result<Var, ModelError>;

    /// Scalar training loss for a batch of training sequences, or `None`
    /// when no sequence in the batch yields a training term.
    fn training_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&[usize]],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError>;

    fn config(&self) -> ModelConfig;
}

pub(crate) fn check_items(items: &[usize], num_items: usize) -> Result<(), ModelError> {
    match items.iter().find(|&&i| i >= num_items) {
        Some(&item) => Err(ModelError::ItemOutOfRange { item, num_items }),
        None => Ok(()),
    }
}

/// Scores `candidates` by evaluating the model's catalog logits once.
pub(crate) fn score_with_logits<M: NeuralModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    candidates: &[usize],
) -> Result<Vec<f64>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    check_items(prefix, model.num_items())?;
    check_items(candidates, model.num_items())?;
    let mut g = Graph::new(model.params());
    let logits = model.logits(&mut g, prefix)?;
    let all = g.value(logits).data();
    let out: Vec<f64> = candidates.iter().map(|&c| all[c]).collect();
    if let Some(j) = out.iter().position(|s| !s.is_finite()) {
        return Err(ModelError::NonFiniteScore { item: candidates[j] });
    }
    Ok(out)
}

/// Negative log-softmax of the `(row, item)` targets, summed or averaged.
pub(crate) fn cross_entropy(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[(usize, usize)],
    reduction: LossReduction,
) -> Result<Var, AutodiffError> {
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, targets)?;
    let total = g.sum(picked);
    let factor = match reduction {
        LossReduction::Sum => -1.0,
        LossReduction::Mean => -1.0 / targets.len().max(1) as f64,
    };
    Ok(g.scale(total, factor))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Gru,
    Narm,
    Sasrec,
    Bert4rec,
    Popularity,
    Markov,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Gru,
        Architecture::Narm,
        Architecture::Sasrec,
        Architecture::Bert4rec,
        Architecture::Popularity,
        Architecture::Markov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gru => "gru",
            Architecture::Narm => "narm",
            Architecture::Sasrec => "sasrec",
            Architecture::Bert4rec => "bert4rec",
            Architecture::Popularity => "popularity",
            Architecture::Markov => "markov",
        }
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, Architecture::Popularity | Architecture::Markov)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == lower)
            .or(match lower.as_str() {
                "pop" => Some(Architecture::Popularity),
                "bert" => Some(Architecture::Bert4rec),
                _ => None,
            })
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

/// Architecture plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
pub enum ModelConfig {
    Gru(GruConfig),
    Narm(NarmConfig),
    Sasrec(SasRecConfig),
    Bert4rec(Bert4RecConfig),
    Popularity,
    Markov,
}

impl ModelConfig {
    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Gru => ModelConfig::Gru(GruConfig::default()),
            Architecture::Narm => ModelConfig::Narm(NarmConfig::default()),
            Architecture::Sasrec => ModelConfig::Sasrec(SasRecConfig::default()),
            Architecture::Bert4rec => ModelConfig::Bert4rec(Bert4RecConfig::default()),
            Architecture::Popularity => ModelConfig::Popularity,
            Architecture::Markov => ModelConfig::Markov,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::Gru(_) => Architecture::Gru,
            ModelConfig::Narm(_) => Architecture::Narm,
            ModelConfig::Sasrec(_) => Architecture::Sasrec,
            ModelConfig::Bert4rec(_) => Architecture::Bert4rec,
            ModelConfig::Popularity => Architecture::Popularity,
            ModelConfig::Markov => Architecture::Markov,
        }
    }
}

/// Builds a freshly initialized neural model. Baselines are fitted from
/// data instead, see [`fit_baseline`].
pub fn build_neural(
    config: &ModelConfig,
    name: &str,
    num_items: usize,
    init_seed: u64,
) -> Result<Box<dyn NeuralModel>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    Ok(match config {
        ModelConfig::Gru(c) => Box::new(Gru::new(name, num_items, c.clone(), &mut rng)?),
        ModelConfig::Narm(c) => Box::new(Narm::new(name, num_items, c.clone(), &mut rng)?),
        ModelConfig::Sasrec(c) => Box::new(SasRec::new(name, num_items, c.clone(), &mut rng)?),
        ModelConfig::Bert4rec(c) => Box::new(Bert4Rec::new(name, num_items, c.clone(), &mut rng)?),
        ModelConfig::Popularity | ModelConfig::Markov => {
            return Err(ModelError::InvalidConfig(format!(
                "{} is a baseline without trainable parameters",
                config.architecture()
            )))
        }
    })
}

/// Fits a non-neural baseline on training sequences.
pub fn fit_baseline(
    config: &ModelConfig,
    name: &str,
    num_items: usize,
    train: &[Vec<usize>],
    counts: &[u64],
) -> Result<Box<dyn ScoreFunction>, ModelError> {
    match config {
        ModelConfig::Popularity => Ok(Box::new(PopularityScorer::new(name, counts.to_vec())?)),
        ModelConfig::Markov => Ok(Box::new(MarkovScorer::fit(name, num_items, train)?)),
        _ => Err(ModelError::InvalidConfig(format!(
            "{} is trained, not fitted",
            config.architecture()
        ))),
    }
}

/// Hex SHA-256 of the catalog's external item ids, one per line.
pub fn catalog_checksum(ds: &SequenceDataset) -> String {
    let mut h = Sha256::new();
    for item in &ds.items {
        h.update(item.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Describes a stored checkpoint so it is only loaded into a matching model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub num_items: usize,
    pub catalog_checksum: String,
    pub parameter_count: usize,
}

impl ModelManifest {
    pub fn describe(model: &dyn NeuralModel, catalog_checksum: &str) -> Self {
        Self {
            name: model.name().to_string(),
            architecture: model.architecture(),
            config: model.config(),
            num_items: model.num_items(),
            catalog_checksum: catalog_checksum.to_string(),
            parameter_count: model.parameter_count(),
        }
    }

    /// Rebuilds the model and loads `checkpoint` into it after checking the
    /// catalog matches.
    pub fn restore(&self, checkpoint: &[u8], expected_catalog: &str) -> Result<Box<dyn NeuralModel>, ModelError> {
        if self.catalog_checksum != expected_catalog {
            return Err(ModelError::Manifest(format!(
                "checkpoint for `{}` was trained on a different catalog",
                self.name
            )));
        }
        let mut model = build_neural(&self.config, &self.name, self.num_items, 0)?;
        let values = crate::autodiff::decode_checkpoint(checkpoint)?;
        model.params_mut().load_values(values)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
        }
        assert!("caser".parse::<Architecture>().is_err());
    }

    #[test]
    fn config_serializes_with_architecture_tag() {
        let c = ModelConfig::default_for(Architecture::Narm);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"architecture\":\"narm\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn uniform_logits_give_log_catalog_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(crate::autodiff::Tensor::zeros(&[1, 4]));
        let loss = cross_entropy(&mut g, logits, &[(0, 2)], LossReduction::Sum).unwrap();
        assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_vanishing_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(crate::autodiff::Tensor::row(vec![-50.0, 50.0, -50.0]));
        let loss = cross_entropy(&mut g, logits, &[(0, 1)], LossReduction::Sum).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-40);
    }
}
