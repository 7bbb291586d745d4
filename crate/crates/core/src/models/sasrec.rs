use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Activation, EncoderConfig, TransformerEncoder};
use super::{
    check_items, score_with_logits, Architecture, LossReduction, ModelConfig, ModelError, NeuralModel, ScoreFunction,
};
use crate::autodiff::{Graph, HasParams, ParamStore, Var};

/// Which items a sampled BPR negative must avoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeExclusion {
    /// Any item of the training sequence.
    WholeSequence,
    /// Only the target of the current step. Earlier items must stay
    /// eligible, or nothing teaches the model to rank the next item above
    /// ones already seen.
    #[default]
    StepOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SasRecConfig {
    pub hidden_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub negatives: NegativeExclusion,
    pub loss: LossReduction,
}

impl Default for SasRecConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            max_len: 50,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            negatives: NegativeExclusion::StepOnly,
            loss: LossReduction::Sum,
        }
    }
}

/// Causal self-attention encoder trained with a pairwise BPR objective;
/// scores are dot products with the item embeddings.
#[derive(Clone, Debug)]
pub struct SasRec {
    name: String,
    config: SasRecConfig,
    num_items: usize,
    store: ParamStore,
    encoder: TransformerEncoder,
}

/// Uniform draw from `0..n` avoiding `excluded`, or `None` if nothing is left.
pub(crate) fn sample_excluding<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    excluded: impl Fn(usize) -> bool,
) -> Option<usize> {
    const TRIES: usize = 32;
    for _ in 0..TRIES {
        let c = rng.gen_range(0..n);
        if !excluded(c) {
            return Some(c);
        }
    }
    let allowed: Vec<usize> = (0..n).filter(|&c| !excluded(c)).collect();
    if allowed.is_empty() {
        None
    } else {
        Some(allowed[rng.gen_range(0..allowed.len())])
    }
}

impl SasRec {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        num_items: usize,
        config: SasRecConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::new(
            &mut store,
            EncoderConfig {
                hidden_size: config.hidden_size,
                max_len: config.max_len,
                layers: config.layers,
                heads: config.heads,
                dropout: config.dropout,
                activation: Activation::Relu,
                causal: true,
                vocab: num_items,
            },
            rng,
        )?;
        Ok(Self {
            name: name.to_string(),
            config,
            num_items,
            store,
            encoder,
        })
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    fn truncate<'a>(&self, items: &'a [usize]) -> &'a [usize] {
        &items[items.len().saturating_sub(self.config.max_len)..]
    }

    /// Positive and negative items per training step of `seq`.
    pub fn bpr_pairs<R: Rng + ?Sized>(&self, seq: &[usize], rng: &mut R) -> Vec<(usize, Option<usize>)> {
        let n = self.num_items;
        seq[1..]
            .iter()
            .map(|&pos| {
                let neg = match self.config.negatives {
                    NegativeExclusion::WholeSequence => sample_excluding(rng, n, |c| seq.contains(&c))
                        .or_else(|| sample_excluding(rng, n, |c| c == pos)),
                    NegativeExclusion::StepOnly => sample_excluding(rng, n, |c| c == pos),
                };
                (pos, neg)
            })
            .collect()
    }
}

impl HasParams for SasRec {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ScoreFunction for SasRec {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        score_with_logits(self, prefix, candidates)
    }

    fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }
}

impl NeuralModel for SasRec {
    fn architecture(&self) -> Architecture {
        Architecture::Sasrec
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    /// Only the most recent `max_len` items are used.
    fn logits(&self, g: &mut Graph<'_>, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let items = self.truncate(prefix);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = self.encoder.encode(g, items, &mut rng)?.states;
        let t = items.len();
        let last = g.slice_rows(states, t - 1, t)?;
        let table = g.param(self.encoder.tokens);
        let mt = g.transpose(table);
        Ok(g.matmul(last, mt)?)
    }

    /// `-sum(log sigmoid(o_pos) + log(1 - sigmoid(o_neg)))` over every step.
    fn training_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&[usize]],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError> {
        let mut states = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut row = 0;
        for seq in batch.iter().filter(|s| s.len() >= 2) {
            check_items(seq, self.num_items)?;
            let seq = &seq[seq.len().saturating_sub(self.config.max_len + 1)..];
            let pairs = self.bpr_pairs(seq, rng);
            states.push(self.encoder.encode(g, &seq[..seq.len() - 1], rng)?.states);
            for (p, n) in pairs {
                pos.push((row, p));
                if let Some(n) = n {
                    neg.push((row, n));
                }
                row += 1;
            }
        }
        if states.is_empty() {
            return Ok(None);
        }
        let h = g.concat_rows(&states)?;
        let table = g.param(self.encoder.tokens);
        let mt = g.transpose(table);
        let logits = g.matmul(h, mt)?;
        let p = g.pick(logits, &pos)?;
        let lp = g.log_sigmoid(p);
        let mut total = g.sum(lp);
        if !neg.is_empty() {
            let n = g.pick(logits, &neg)?;
            let flipped = g.scale(n, -1.0);
            let ln = g.log_sigmoid(flipped);
            let sn = g.sum(ln);
            total = g.add(total, sn)?;
        }
        let factor = match self.config.loss {
            LossReduction::Sum => -1.0,
            LossReduction::Mean => -1.0 / pos.len() as f64,
        };
        Ok(Some(g.scale(total, factor)))
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Sasrec(self.config.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::models::transformer::tests::{randomize, reference_encode};

    fn toy(seed: u64) -> SasRec {
        let cfg = SasRecConfig {
            hidden_size: 8,
            max_len: 8,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            negatives: NegativeExclusion::WholeSequence,
            loss: LossReduction::Sum,
        };
        let mut m = SasRec::new("sasrec", 20, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        randomize(&mut m.store, seed + 7);
        m
    }

    fn dot_scores(m: &SasRec, state: &[f64]) -> Vec<f64> {
        let table = &m.store.get(m.encoder.tokens).value;
        (0..m.num_items)
            .map(|i| table.row_slice(i).iter().zip(state).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn matches_straight_line_reference() {
        let m = toy(1);
        let prefix = [1, 5, 5, 2, 19, 0, 3, 8];
        let mut g = Graph::new(&m.store);
        let logits = m.logits(&mut g, &prefix).unwrap();
        let states = reference_encode(&m.encoder, &m.store, &prefix);
        let expect = dot_scores(&m, states.last().unwrap());
        for (a, b) in g.value(logits).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_later_positions() {
        let m = toy(2);
        let items = [4, 9, 13];
        let mut g = Graph::training(&m.store);
        let out = m
            .encoder
            .encode(&mut g, &items, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let first = g.slice_rows(out.states, 0, 1).unwrap();
        let loss = g.sum(first);
        let grads = g.backward(loss).unwrap();
        let tokens = grads.get(m.encoder.tokens).unwrap();
        assert!(tokens[9 * 8..10 * 8].iter().all(|&v| v == 0.0));
        assert!(tokens[13 * 8..14 * 8].iter().all(|&v| v == 0.0));
        assert!(tokens[4 * 8..5 * 8].iter().any(|&v| v != 0.0));
        let positions = grads.get(m.encoder.positions).unwrap();
        // The second item sits at position max_len - 2.
        assert!(positions[6 * 8..7 * 8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn later_tokens_never_change_earlier_states() {
        let m = toy(3);
        let encode = |seq: &[usize]| {
            let mut g = Graph::new(&m.store);
            let s = m
                .encoder
                .encode(&mut g, seq, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .states;
            g.value(s).data()[..3 * 8].to_vec()
        };
        assert_eq!(encode(&[2, 4, 6, 8, 10]), encode(&[2, 4, 6, 17, 1]));
    }

    #[test]
    fn truncation_keeps_the_most_recent_items() {
        let m = toy(4);
        let long: Vec<usize> = (0..15).collect();
        let a = m.score(&long, &[0, 1, 2, 3]).unwrap();
        let b = m.score(&long[7..], &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_matches_hand_rolled_evaluation() {
        let mut m = toy(5);
        m.config.dropout = 0.0;
        m.encoder.config.dropout = 0.0;
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![7, 0, 7]];
        let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::training(&m.store);
        let loss = m
            .training_loss(&mut g, &refs, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap()
            .unwrap();
        // Replay the same draws.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut expect = 0.0;
        for seq in &batch {
            let pairs = m.bpr_pairs(seq, &mut rng);
            let states = reference_encode(&m.encoder, &m.store, &seq[..seq.len() - 1]);
            for (t, (p, n)) in pairs.into_iter().enumerate() {
                let s = dot_scores(&m, &states[t]);
                let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                expect -= sig(s[p]).ln() + (1.0 - sig(s[n.unwrap()])).ln();
                assert!(!seq.contains(&n.unwrap()));
            }
        }
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn balanced_logits_give_two_ln_two_per_term() {
        let mut m = toy(6);
        for p in m.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let batch: Vec<&[usize]> = vec![&[1, 2]];
        let mut g = Graph::new(&m.store);
        let loss = m
            .training_loss(&mut g, &batch, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .unwrap();
        assert!((g.value(loss).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = toy(7);
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4, 5], vec![5, 0, 7], vec![9, 9, 2, 4], vec![11, 12, 13]];
        let report = gradient_check(&mut m, 1e-5, |m: &SasRec, g: &mut Graph| -> Result<Var, ModelError> {
            let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
            Ok(m.training_loss(g, &refs, &mut ChaCha8Rng::seed_from_u64(5))?.unwrap())
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
