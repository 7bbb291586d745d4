//! Mini-batch Adam training with validation-based model selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelError, NeuralModel, ScoreFunction};
use crate::autodiff::{decode_checkpoint, encode_checkpoint, Adam, AdamConfig, Graph};
use crate::dataset::EvaluationInstance;
use crate::metrics::MetricSpec;
use crate::ranking::{evaluate_models, RankingError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::targetset::TargetSetSpec;

/// Salt separating the validation sampling stream from the batch stream.
const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without a strictly better validation
    /// HR@10; `None` always runs `max_epochs`.
    pub patience: Option<usize>,
    pub seed: u64,
    pub validation: TargetSetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 800,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: Some(20),
            seed: 0,
            validation: TargetSetSpec::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of batch losses over the epoch.
    pub loss: f64,
    pub hr1: f64,
    pub hr10: f64,
    pub ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_run: usize,
    /// Epoch of the selected checkpoint; 0 means the initialization.
    pub best_epoch: usize,
    pub best_hr10: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Encoded parameters of the selected checkpoint, also loaded into the
    /// model on return.
    pub best_checkpoint: Vec<u8>,
    pub optimizer: Adam,
}

impl TrainState {
    /// Highest validation HR@1 over the first `epochs` epochs.
    pub fn best_hr1_within(&self, epochs: usize) -> Option<f64> {
        self.history
            .iter()
            .take_while(|r| r.epoch <= epochs)
            .map(|r| r.hr1)
            .reduce(f64::max)
    }
}

fn ranking_to_model(err: RankingError) -> ModelError {
    match err {
        RankingError::Model { source, .. } => source,
        other => ModelError::InvalidConfig(format!("validation: {other}")),
    }
}

/// Trains `model` in place and leaves it holding the best checkpoint.
///
/// Each epoch shuffles the training sequences with a seed derived from
/// `(config.seed, epoch)`, so runs are bit-reproducible. Sequences shorter
/// than two items carry no training signal and are skipped.
pub fn train(
    model: &mut dyn NeuralModel,
    train_seqs: &[Vec<usize>],
    validation: &[EvaluationInstance],
    counts: &[u64],
    config: &TrainConfig,
) -> Result<TrainState, ModelError> {
    if config.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch size must be positive".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::InvalidConfig(format!(
            "learning rate {}",
            config.learning_rate
        )));
    }
    config
        .validation
        .validate()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut order: Vec<usize> = (0..train_seqs.len()).filter(|&i| train_seqs[i].len() >= 2).collect();
    let mut optimizer = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut state = TrainState {
        epochs_run: 0,
        best_epoch: 0,
        best_hr10: None,
        history: Vec::new(),
        stopped_early: false,
        best_checkpoint: encode_checkpoint(model.params()),
        optimizer: optimizer.clone(),
    };
    let mut since_best = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut rng = rng_from_seed(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| train_seqs[i].as_slice()).collect();
            let last_finite = encode_checkpoint(model.params());
            let diverged = |reason: String| ModelError::Diverged {
                epoch,
                reason,
                last_finite: last_finite.clone(),
            };
            let grads = {
                let mut g = Graph::training(model.params());
                let Some(loss) = model.training_loss(&mut g, &batch, &mut rng)? else {
                    continue;
                };
                let value = g
                    .value(loss)
                    .item()
                    .ok_or_else(|| ModelError::InvalidConfig("training loss is not a scalar".into()))?;
                if !value.is_finite() {
                    return Err(diverged(format!("loss {value}")));
                }
                epoch_loss += value;
                g.backward(loss)?
            };
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads);
            if let Err(e) = optimizer.step(params) {
                let values = decode_checkpoint(&last_finite)?;
                model.params_mut().load_values(values)?;
                return Err(diverged(e.to_string()));
            }
        }
        let record = validate(&*model, validation, counts, config, epoch, epoch_loss)?;
        log::debug!(
            "{} epoch {epoch}: loss {:.4} HR@1 {:.4} HR@10 {:.4}",
            model.name(),
            record.loss,
            record.hr1,
            record.hr10
        );
        let improved = state.best_hr10.is_none_or(|b| record.hr10 > b);
        state.history.push(record);
        state.epochs_run = epoch;
        if improved {
            state.best_hr10 = Some(state.history[epoch - 1].hr10);
            state.best_epoch = epoch;
            state.best_checkpoint = encode_checkpoint(model.params());
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                state.stopped_early = true;
                break;
            }
        }
    }
    let best = decode_checkpoint(&state.best_checkpoint)?;
    model.params_mut().load_values(best)?;
    state.optimizer = optimizer;
    Ok(state)
}

fn validate(
    model: &dyn NeuralModel,
    validation: &[EvaluationInstance],
    counts: &[u64],
    config: &TrainConfig,
    epoch: usize,
    loss: f64,
) -> Result<EpochRecord, ModelError> {
    if validation.is_empty() {
        return Err(ModelError::InvalidConfig("no validation instances".into()));
    }
    let scorer: &dyn ScoreFunction = model;
    let seed = derive_seed(config.validation.seed ^ VALIDATION_STREAM, epoch as u64);
    let run = evaluate_models(
        &[scorer],
        validation,
        model.num_items(),
        &config.validation,
        counts,
        seed,
    )
    .map_err(ranking_to_model)?;
    let m = &run.models[0];
    let mean = |spec: MetricSpec| m.mean(spec).map_err(ranking_to_model);
    Ok(EpochRecord {
        epoch,
        loss,
        hr1: mean(MetricSpec::hr(1))?,
        hr10: mean(MetricSpec::hr(10))?,
        ndcg10: mean(MetricSpec::ndcg(10))?,
    })
}
