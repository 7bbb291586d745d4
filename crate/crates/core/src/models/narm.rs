use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_items, cross_entropy, score_with_logits, Architecture, GruCell, LossReduction, ModelConfig, ModelError,
    NeuralModel, ScoreFunction,
};
use crate::autodiff::{Graph, HasParams, ParamId, ParamStore, Var};

/// How alignment scores become attention weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNorm {
    /// Use the alignment scores directly.
    #[default]
    Unnormalized,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarmConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub attention: AttentionNorm,
    pub loss: LossReduction,
}

impl Default for NarmConfig {
    fn default() -> Self {
        Self {
            embedding_size: 64,
            hidden_size: 64,
            attention: AttentionNorm::Unnormalized,
            loss: LossReduction::Sum,
        }
    }
}

/// Global GRU encoder plus an attentive local GRU encoder; the
/// concatenated representation is mapped to embedding space and scored
/// against the item embeddings.
#[derive(Clone, Debug)]
pub struct Narm {
    name: String,
    config: NarmConfig,
    num_items: usize,
    store: ParamStore,
    embedding: ParamId,
    global: GruCell,
    local: GruCell,
    a_last: ParamId,
    a_each: ParamId,
    a_bias: ParamId,
    v: ParamId,
    b: ParamId,
    b_bias: ParamId,
}

impl Narm {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        num_items: usize,
        config: NarmConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if num_items == 0 || config.embedding_size == 0 || config.hidden_size == 0 {
            return Err(ModelError::InvalidConfig("NARM sizes must be positive".into()));
        }
        let (e, d) = (config.embedding_size, config.hidden_size);
        let mut store = ParamStore::new();
        let embedding = store.add_uniform("embedding", &[num_items, e], rng);
        let global = GruCell::new(&mut store, "global", e, d, rng);
        let local = GruCell::new(&mut store, "local", e, d, rng);
        let a_last = store.add_uniform("attention.a_last", &[d, d], rng);
        let a_each = store.add_uniform("attention.a_each", &[d, d], rng);
        let a_bias = store.add_zeros("attention.bias", &[d]);
        let v = store.add_uniform("attention.v", &[d, 1], rng);
        let b = store.add_uniform("combine.weight", &[2 * d, e], rng);
        let b_bias = store.add_zeros("combine.bias", &[e]);
        Ok(Self {
            name: name.to_string(),
            config,
            num_items,
            store,
            embedding,
            global,
            local,
            a_last,
            a_each,
            a_bias,
            v,
            b,
            b_bias,
        })
    }

    pub fn ids(&self) -> NarmIds {
        NarmIds {
            embedding: self.embedding,
            a_last: self.a_last,
            a_each: self.a_each,
            a_bias: self.a_bias,
            v: self.v,
            b: self.b,
            b_bias: self.b_bias,
        }
    }

    pub fn cells(&self) -> (&GruCell, &GruCell) {
        (&self.global, &self.local)
    }

    /// Attention weights `[t, 1]` of the local encoder for prefix end `t`.
    fn attention(&self, g: &mut Graph<'_>, last_q: Var, keys: Var) -> Result<Var, ModelError> {
        let pre = g.add(keys, last_q)?;
        let act = g.sigmoid(pre);
        let v = g.param(self.v);
        let alpha = g.matmul(act, v)?;
        Ok(match self.config.attention {
            AttentionNorm::Unnormalized => alpha,
            AttentionNorm::Softmax => {
                let row = g.transpose(alpha);
                let soft = g.softmax(row);
                g.transpose(soft)
            }
        })
    }

    /// Sequence representations `[t, 2d]`, one per prefix end of `items`.
    fn representations(&self, g: &mut Graph<'_>, items: &[usize]) -> Result<Var, ModelError> {
        let table = g.param(self.embedding);
        let x = g.embedding(table, items)?;
        let hg = self.global.run(g, x)?;
        let hl = self.local.run(g, x)?;
        let a_last = g.param(self.a_last);
        let a_each = g.param(self.a_each);
        let a_bias = g.param(self.a_bias);
        let q = g.matmul(hl, a_last)?;
        let k = g.matmul(hl, a_each)?;
        let k = g.add(k, a_bias)?;
        let mut rows = Vec::with_capacity(items.len());
        for t in 0..items.len() {
            let q_t = g.slice_rows(q, t, t + 1)?;
            let k_t = g.slice_rows(k, 0, t + 1)?;
            let alpha = self.attention(g, q_t, k_t)?;
            let alpha_row = g.transpose(alpha);
            let h_t = g.slice_rows(hl, 0, t + 1)?;
            let c_local = g.matmul(alpha_row, h_t)?;
            let c_global = g.slice_rows(hg, t, t + 1)?;
            rows.push(g.concat_cols(&[c_global, c_local])?);
        }
        Ok(g.concat_rows(&rows)?)
    }

    fn project(&self, g: &mut Graph<'_>, c: Var) -> Result<Var, ModelError> {
        let b = g.param(self.b);
        let bb = g.param(self.b_bias);
        let cb = g.matmul(c, b)?;
        let cb = g.add(cb, bb)?;
        let table = g.param(self.embedding);
        let mt = g.transpose(table);
        Ok(g.matmul(cb, mt)?)
    }

    /// Attention weights over the prefix, for inspection.
    pub fn attention_weights(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        check_items(prefix, self.num_items)?;
        let mut g = Graph::new(&self.store);
        let table = g.param(self.embedding);
        let x = g.embedding(table, prefix)?;
        let hl = self.local.run(&mut g, x)?;
        let t = prefix.len();
        let a_last = g.param(self.a_last);
        let a_each = g.param(self.a_each);
        let a_bias = g.param(self.a_bias);
        let last = g.slice_rows(hl, t - 1, t)?;
        let q = g.matmul(last, a_last)?;
        let k = g.matmul(hl, a_each)?;
        let k = g.add(k, a_bias)?;
        let alpha = self.attention(&mut g, q, k)?;
        Ok(g.value(alpha).data().to_vec())
    }
}

/// Parameter handles of a [`Narm`], for inspection.
#[derive(Clone, Copy, Debug)]
pub struct NarmIds {
    pub embedding: ParamId,
    pub a_last: ParamId,
    pub a_each: ParamId,
    pub a_bias: ParamId,
    pub v: ParamId,
    pub b: ParamId,
    pub b_bias: ParamId,
}

impl HasParams for Narm {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ScoreFunction for Narm {
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

impl NeuralModel for Narm {
    fn architecture(&self) -> Architecture {
        Architecture::Narm
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn logits(&self, g: &mut Graph<'_>, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        // Only the last representation is needed, but the local encoder
        // attends over every state, so the full pass is required anyway.
        let table = g.param(self.embedding);
        let x = g.embedding(table, prefix)?;
        let hg = self.global.run(g, x)?;
        let hl = self.local.run(g, x)?;
        let t = prefix.len();
        let a_last = g.param(self.a_last);
        let a_each = g.param(self.a_each);
        let a_bias = g.param(self.a_bias);
        let last = g.slice_rows(hl, t - 1, t)?;
        let q = g.matmul(last, a_last)?;
        let k = g.matmul(hl, a_each)?;
        let k = g.add(k, a_bias)?;
        let alpha = self.attention(g, q, k)?;
        let alpha_row = g.transpose(alpha);
        let c_local = g.matmul(alpha_row, hl)?;
        let c_global = g.slice_rows(hg, t - 1, t)?;
        let c = g.concat_cols(&[c_global, c_local])?;
        self.project(g, c)
    }

    fn training_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&[usize]],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError> {
        let mut reps = Vec::new();
        let mut targets = Vec::new();
        for seq in batch.iter().filter(|s| s.len() >= 2) {
            check_items(seq, self.num_items)?;
            reps.push(self.representations(g, &seq[..seq.len() - 1])?);
            for &next in &seq[1..] {
                targets.push((targets.len(), next));
            }
        }
        if reps.is_empty() {
            return Ok(None);
        }
        let c = g.concat_rows(&reps)?;
        let logits = self.project(g, c)?;
        Ok(Some(cross_entropy(g, logits, &targets, self.config.loss)?))
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Narm(self.config.clone())
    }
}
