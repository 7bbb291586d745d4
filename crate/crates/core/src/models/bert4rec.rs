use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Activation, EncoderConfig, TransformerEncoder};
use super::{
    check_items, cross_entropy, score_with_logits, Architecture, LossReduction, ModelConfig, ModelError, NeuralModel,
    ScoreFunction,
};
use crate::autodiff::{Graph, HasParams, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bert4RecConfig {
    pub hidden_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Per-position masking probability.
    pub mask_prob: f64,
    /// Probability that a sequence masks only its last position.
    pub last_mask_prob: f64,
    pub loss: LossReduction,
}

impl Default for Bert4RecConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            max_len: 50,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            mask_prob: 0.2,
            last_mask_prob: 0.1,
            loss: LossReduction::Sum,
        }
    }
}

/// Bidirectional encoder trained on a cloze objective. Item `num_items`
/// is the mask token; the output layer is tied to the item rows of the
/// token table.
#[derive(Clone, Debug)]
pub struct Bert4Rec {
    name: String,
    config: Bert4RecConfig,
    num_items: usize,
    store: ParamStore,
    encoder: TransformerEncoder,
}

impl Bert4Rec {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        num_items: usize,
        config: Bert4RecConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if !(config.mask_prob > 0.0 && config.mask_prob < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "mask probability {} outside (0, 1)",
                config.mask_prob
            )));
        }
        if !(0.0..=1.0).contains(&config.last_mask_prob) {
            return Err(ModelError::InvalidConfig(format!(
                "last-item mask probability {} outside [0, 1]",
                config.last_mask_prob
            )));
        }
        if config.max_len < 2 {
            return Err(ModelError::InvalidConfig("BERT4Rec needs max_len >= 2".into()));
        }
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::new(
            &mut store,
            EncoderConfig {
                hidden_size: config.hidden_size,
                max_len: config.max_len,
                layers: config.layers,
                heads: config.heads,
                dropout: config.dropout,
                activation: Activation::Gelu,
                causal: false,
                vocab: num_items + 1,
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

    pub fn mask_token(&self) -> usize {
        self.num_items
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    /// Positions to mask in a training sequence of length `len`, ascending.
    pub fn cloze_positions<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        if len == 0 {
            return Vec::new();
        }
        if rng.gen::<f64>() < self.config.last_mask_prob {
            return vec![len - 1];
        }
        let picked: Vec<usize> = (0..len).filter(|_| rng.gen::<f64>() < self.config.mask_prob).collect();
        if picked.is_empty() {
            vec![rng.gen_range(0..len)]
        } else {
            picked
        }
    }

    fn item_logits(&self, g: &mut Graph<'_>, states: Var) -> Result<Var, ModelError> {
        let table = g.param(self.encoder.tokens);
        let items = g.slice_rows(table, 0, self.num_items)?;
        let mt = g.transpose(items);
        Ok(g.matmul(states, mt)?)
    }

    /// Catalog scores at every mask position of `masked`, in order.
    pub fn masked_scores(&self, masked: &[usize]) -> Result<Vec<(usize, Vec<f64>)>, ModelError> {
        check_items(masked, self.num_items + 1)?;
        let positions: Vec<usize> = (0..masked.len()).filter(|&i| masked[i] == self.mask_token()).collect();
        if positions.is_empty() {
            return Err(ModelError::NoMaskToken);
        }
        let mut g = Graph::new(&self.store);
        let states = self
            .encoder
            .encode(&mut g, masked, &mut ChaCha8Rng::seed_from_u64(0))?
            .states;
        let logits = self.item_logits(&mut g, states)?;
        let t = g.value(logits);
        Ok(positions.into_iter().map(|p| (p, t.row_slice(p).to_vec())).collect())
    }
}

impl HasParams for Bert4Rec {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ScoreFunction for Bert4Rec {
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

impl NeuralModel for Bert4Rec {
    fn architecture(&self) -> Architecture {
        Architecture::Bert4rec
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    /// Appends a mask token to the most recent `max_len - 1` items and
    /// scores the masked position.
    fn logits(&self, g: &mut Graph<'_>, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let keep = self.config.max_len - 1;
        let mut tokens = prefix[prefix.len().saturating_sub(keep)..].to_vec();
        tokens.push(self.mask_token());
        let states = self
            .encoder
            .encode(g, &tokens, &mut ChaCha8Rng::seed_from_u64(0))?
            .states;
        let t = tokens.len();
        let last = g.slice_rows(states, t - 1, t)?;
        self.item_logits(g, last)
    }

    /// Cross-entropy of the original items at the masked positions.
    fn training_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&[usize]],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError> {
        let mut states = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for seq in batch.iter().filter(|s| !s.is_empty()) {
            check_items(seq, self.num_items)?;
            let seq = &seq[seq.len().saturating_sub(self.config.max_len)..];
            let masked_at = self.cloze_positions(seq.len(), rng);
            let mut tokens = seq.to_vec();
            for &p in &masked_at {
                tokens[p] = self.mask_token();
                targets.push((offset + p, seq[p]));
            }
            states.push(self.encoder.encode(g, &tokens, rng)?.states);
            offset += seq.len();
        }
        if states.is_empty() {
            return Ok(None);
        }
        let h = g.concat_rows(&states)?;
        let logits = self.item_logits(g, h)?;
        Ok(Some(cross_entropy(g, logits, &targets, self.config.loss)?))
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Bert4rec(self.config.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::models::transformer::tests::{randomize, reference_encode};

    fn toy(seed: u64) -> Bert4Rec {
        let cfg = Bert4RecConfig {
            hidden_size: 8,
            max_len: 8,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            ..Default::default()
        };
        let mut m = Bert4Rec::new("bert4rec", 20, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        randomize(&mut m.store, seed + 3);
        m
    }

    fn dot_scores(m: &Bert4Rec, state: &[f64]) -> Vec<f64> {
        let table = &m.store.get(m.encoder.tokens).value;
        (0..m.num_items)
            .map(|i| table.row_slice(i).iter().zip(state).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn matches_straight_line_reference() {
        let m = toy(1);
        let prefix = [3, 1, 4, 1, 5, 9, 2, 6, 5];
        let mut g = Graph::new(&m.store);
        let logits = m.logits(&mut g, &prefix).unwrap();
        let mut tokens = prefix[2..].to_vec();
        tokens.push(20);
        let states = reference_encode(&m.encoder, &m.store, &tokens);
        let expect = dot_scores(&m, states.last().unwrap());
        for (a, b) in g.value(logits).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lone_mask_depends_only_on_mask_and_position_embeddings() {
        let mut m = toy(2);
        let state = |m: &Bert4Rec| {
            let mut g = Graph::new(&m.store);
            let s = m
                .encoder
                .encode(&mut g, &[20], &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .states;
            g.value(s).data().to_vec()
        };
        let before = state(&m);
        let tokens = m.encoder.tokens;
        // Rewrite every item row; the mask row (20) is left alone.
        for v in m.store.get_mut(tokens).value.data_mut()[..20 * 8].iter_mut() {
            *v = -*v + 0.25;
        }
        assert_eq!(state(&m), before);
        m.store.get_mut(tokens).value.data_mut()[20 * 8] += 0.5;
        assert_ne!(state(&m), before);
    }

    #[test]
    fn unmasked_sequence_is_rejected() {
        assert!(matches!(toy(3).masked_scores(&[1, 2, 3]), Err(ModelError::NoMaskToken)));
    }

    #[test]
    fn bidirectional_attention_passes_gradient_backwards() {
        let m = toy(4);
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
        assert!(tokens[13 * 8..14 * 8].iter().any(|&v| v.abs() > 0.0));
    }

    #[test]
    fn cloze_positions_are_reproducible_and_never_empty() {
        let m = toy(5);
        for seed in 0..200 {
            let a = m.cloze_positions(6, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = m.cloze_positions(6, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert!(!a.is_empty() && a.iter().all(|&p| p < 6));
        }
        let mut always_last = toy(5);
        always_last.config.last_mask_prob = 1.0;
        for seed in 0..50 {
            assert_eq!(
                always_last.cloze_positions(6, &mut ChaCha8Rng::seed_from_u64(seed)),
                vec![5]
            );
        }
    }

    #[test]
    fn loss_matches_reference_at_masked_positions() {
        let mut m = toy(6);
        m.encoder.config.dropout = 0.0;
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![7, 0, 7, 5, 5, 6]];
        let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::training(&m.store);
        let loss = m
            .training_loss(&mut g, &refs, &mut ChaCha8Rng::seed_from_u64(21))
            .unwrap()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut expect = 0.0;
        for seq in &batch {
            let masked_at = m.cloze_positions(seq.len(), &mut rng);
            let mut tokens = seq.clone();
            masked_at.iter().for_each(|&p| tokens[p] = 20);
            let states = reference_encode(&m.encoder, &m.store, &tokens);
            for &p in &masked_at {
                let s = dot_scores(&m, &states[p]);
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                expect += lse - s[seq[p]];
            }
        }
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn uniform_scores_give_log_catalog_loss() {
        let mut m = Bert4Rec::new(
            "b",
            4,
            Bert4RecConfig {
                hidden_size: 4,
                max_len: 4,
                layers: 1,
                heads: 1,
                dropout: 0.0,
                last_mask_prob: 1.0,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for p in m.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&m.store);
        let batch: Vec<&[usize]> = vec![&[0, 1, 2]];
        let loss = m
            .training_loss(&mut g, &batch, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .unwrap();
        assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = toy(7);
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4, 5], vec![5, 0, 7], vec![9, 9, 2, 4], vec![11, 12, 13]];
        let report = gradient_check(&mut m, 1e-5, |m: &Bert4Rec, g: &mut Graph| -> Result<Var, ModelError> {
            let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
            Ok(m.training_loss(g, &refs, &mut ChaCha8Rng::seed_from_u64(5))?.unwrap())
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
