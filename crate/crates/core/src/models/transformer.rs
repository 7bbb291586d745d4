//! Pre-norm transformer encoder shared by SASRec and BERT4Rec.
//!
//! Each block computes
//! `x = x + dropout(attn(norm(x)))` then `x = x + dropout(ffn(norm(x)))`,
//! and a final layer norm follows the last block. Attention logits are
//! scaled by `1/sqrt(d)` with `d` the model width (not the head width).
//! Sequences are processed unpadded; a sequence of length `t` uses the
//! last `t` of the `T` learned positions, so the newest item always sits
//! at position `T - 1`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub causal: bool,
    /// Rows of the token table (catalog size, plus one for a mask token).
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: (ParamId, ParamId),
    pub heads: Vec<Head>,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub norm2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: (ParamId, ParamId),
}

/// Encoder output plus the attention matrices of every block and head.
pub struct Encoded {
    pub states: Var,
    pub attention: Vec<Vec<Var>>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let d = config.hidden_size;
        if d == 0 || config.heads == 0 || config.max_len == 0 || config.vocab == 0 {
            return Err(ModelError::InvalidConfig("transformer sizes must be positive".into()));
        }
        if !d.is_multiple_of(config.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden size {d} is not divisible by {} heads",
                config.heads
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                config.dropout
            )));
        }
        let dh = d / config.heads;
        let tokens = store.add_uniform("tokens", &[config.vocab, d], rng);
        let positions = store.add_uniform("positions", &[config.max_len, d], rng);
        let norm = |store: &mut ParamStore, name: String| {
            (
                store.add_ones(format!("{name}.gain"), &[d]),
                store.add_zeros(format!("{name}.bias"), &[d]),
            )
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let norm1 = norm(store, format!("block{l}.norm1"));
            let heads = (0..config.heads)
                .map(|h| {
                    let p = format!("block{l}.head{h}");
                    Head {
                        w_q: store.add_uniform(format!("{p}.w_q"), &[d, dh], rng),
                        b_q: store.add_zeros(format!("{p}.b_q"), &[dh]),
                        w_k: store.add_uniform(format!("{p}.w_k"), &[d, dh], rng),
                        b_k: store.add_zeros(format!("{p}.b_k"), &[dh]),
                        w_v: store.add_uniform(format!("{p}.w_v"), &[d, dh], rng),
                        b_v: store.add_zeros(format!("{p}.b_v"), &[dh]),
                    }
                })
                .collect();
            let w_o = store.add_uniform(format!("block{l}.w_o"), &[d, d], rng);
            let b_o = store.add_zeros(format!("block{l}.b_o"), &[d]);
            let norm2 = norm(store, format!("block{l}.norm2"));
            let ff1 = (
                store.add_uniform(format!("block{l}.ff1.weight"), &[d, d], rng),
                store.add_zeros(format!("block{l}.ff1.bias"), &[d]),
            );
            let ff2 = (
                store.add_uniform(format!("block{l}.ff2.weight"), &[d, d], rng),
                store.add_zeros(format!("block{l}.ff2.bias"), &[d]),
            );
            blocks.push(Block {
                norm1,
                heads,
                w_o,
                b_o,
                norm2,
                ff1,
                ff2,
            });
        }
        let final_norm = norm(store, "final_norm".into());
        Ok(Self {
            config,
            tokens,
            positions,
            blocks,
            final_norm,
        })
    }

    fn affine(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let w = g.param(w);
        let b = g.param(b);
        let xw = g.matmul(x, w)?;
        Ok(g.add(xw, b)?)
    }

    fn norm(g: &mut Graph<'_>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gain = g.param(gain);
        let bias = g.param(bias);
        let scaled = g.mul(n, gain)?;
        Ok(g.add(scaled, bias)?)
    }

    /// `mask[i * t + j]` is true where query `i` may not see key `j`.
    pub fn attention_mask(&self, t: usize) -> Vec<bool> {
        (0..t * t).map(|k| self.config.causal && k % t > k / t).collect()
    }

    /// Encodes `tokens` (at most `max_len` of them) into `[t, d]` states.
    pub fn encode(&self, g: &mut Graph<'_>, tokens: &[usize], rng: &mut ChaCha8Rng) -> Result<Encoded, ModelError> {
        let t = tokens.len();
        let cfg = &self.config;
        if t == 0 {
            return Err(ModelError::EmptyPrefix);
        }
        if t > cfg.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "sequence of length {t} exceeds the maximum length {}",
                cfg.max_len
            )));
        }
        let table = g.param(self.tokens);
        let pos_table = g.param(self.positions);
        let e = g.embedding(table, tokens)?;
        let pos: Vec<usize> = (cfg.max_len - t..cfg.max_len).collect();
        let p = g.embedding(pos_table, &pos)?;
        let x0 = g.add(e, p)?;
        let mut x = g.dropout(x0, cfg.dropout, rng);
        let mask = self.attention_mask(t);
        let scale = 1.0 / (cfg.hidden_size as f64).sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let y = Self::norm(g, x, block.norm1)?;
            let mut heads = Vec::with_capacity(block.heads.len());
            let mut maps = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let q = Self::affine(g, y, (head.w_q, head.b_q))?;
                let k = Self::affine(g, y, (head.w_k, head.b_k))?;
                let v = Self::affine(g, y, (head.w_v, head.b_v))?;
                let kt = g.transpose(k);
                let logits = g.matmul(q, kt)?;
                let logits = g.scale(logits, scale);
                let weights = g.masked_softmax(logits, &mask)?;
                maps.push(weights);
                heads.push(g.matmul(weights, v)?);
            }
            let cat = g.concat_cols(&heads)?;
            let mh = Self::affine(g, cat, (block.w_o, block.b_o))?;
            let mh = g.dropout(mh, cfg.dropout, rng);
            x = g.add(x, mh)?;
            let y = Self::norm(g, x, block.norm2)?;
            let h = Self::affine(g, y, block.ff1)?;
            let h = match cfg.activation {
                Activation::Relu => g.relu(h),
                Activation::Gelu => g.gelu(h),
            };
            let f = Self::affine(g, h, block.ff2)?;
            let f = g.dropout(f, cfg.dropout, rng);
            x = g.add(x, f)?;
            attention.push(maps);
        }
        let states = Self::norm(g, x, self.final_norm)?;
        Ok(Encoded { states, attention })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;

    fn mat(store: &ParamStore, id: ParamId) -> &Tensor {
        &store.get(id).value
    }

    fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..b.cols())
                    .map(|c| (0..b.rows()).map(|r| row[r] * b.get(r, c)).sum())
                    .collect()
            })
            .collect()
    }

    fn plus_row(a: Vec<Vec<f64>>, b: &Tensor) -> Vec<Vec<f64>> {
        a.into_iter()
            .map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn layer_norm(a: &[Vec<f64>], store: &ParamStore, (g, b): (ParamId, ParamId)) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, x)| {
                        (x - mean) / (var + LAYER_NORM_EPS).sqrt() * mat(store, g).data()[j] + mat(store, b).data()[j]
                    })
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Straight-line evaluation-mode encoder over raw parameter values.
    pub(crate) fn reference_encode(enc: &TransformerEncoder, store: &ParamStore, tokens: &[usize]) -> Vec<Vec<f64>> {
        let cfg = &enc.config;
        let t = tokens.len();
        let tok = mat(store, enc.tokens);
        let pos = mat(store, enc.positions);
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &item)| {
                let p = cfg.max_len - t + i;
                tok.row_slice(item)
                    .iter()
                    .zip(pos.row_slice(p))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        for block in &enc.blocks {
            let y = layer_norm(&x, store, block.norm1);
            let mut cat = vec![Vec::new(); t];
            for head in &block.heads {
                let q = plus_row(matmul(&y, mat(store, head.w_q)), mat(store, head.b_q));
                let k = plus_row(matmul(&y, mat(store, head.w_k)), mat(store, head.b_k));
                let v = plus_row(matmul(&y, mat(store, head.w_v)), mat(store, head.b_v));
                for i in 0..t {
                    let visible: Vec<usize> = (0..t).filter(|&j| !cfg.causal || j <= i).collect();
                    let logits: Vec<f64> = visible
                        .iter()
                        .map(|&j| {
                            q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (cfg.hidden_size as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    cat[i].extend((0..v[0].len()).map(|c| {
                        visible
                            .iter()
                            .zip(&logits)
                            .map(|(&j, l)| (l - mx).exp() / z * v[j][c])
                            .sum::<f64>()
                    }));
                }
            }
            let mh = plus_row(matmul(&cat, mat(store, block.w_o)), mat(store, block.b_o));
            for i in 0..t {
                for c in 0..cfg.hidden_size {
                    x[i][c] += mh[i][c];
                }
            }
            let y = layer_norm(&x, store, block.norm2);
            let mut h = plus_row(matmul(&y, mat(store, block.ff1.0)), mat(store, block.ff1.1));
            for row in h.iter_mut() {
                for v in row.iter_mut() {
                    *v = match cfg.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Gelu => gelu(*v),
                    };
                }
            }
            let f = plus_row(matmul(&h, mat(store, block.ff2.0)), mat(store, block.ff2.1));
            for i in 0..t {
                for c in 0..cfg.hidden_size {
                    x[i][c] += f[i][c];
                }
            }
        }
        layer_norm(&x, store, enc.final_norm)
    }

    pub(crate) fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
    }

    fn toy(causal: bool, heads: usize, layers: usize) -> (TransformerEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            hidden_size: 8,
            max_len: 8,
            layers,
            heads,
            dropout: 0.2,
            activation: if causal { Activation::Relu } else { Activation::Gelu },
            causal,
            vocab: 21,
        };
        let enc = TransformerEncoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        randomize(&mut store, 2);
        (enc, store)
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (enc, store) = toy(true, 1, 1);
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &[3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.value(out.attention[0][0]).data(), &[1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for causal in [true, false] {
            let (enc, store) = toy(causal, 2, 2);
            let mut g = Graph::new(&store);
            let out = enc
                .encode(&mut g, &[3, 1, 4, 1, 5, 9], &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            for maps in &out.attention {
                for &m in maps {
                    let t = g.value(m);
                    for r in 0..t.rows() {
                        let s: f64 = t.row_slice(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                        if causal {
                            assert!(t.row_slice(r)[r + 1..].iter().all(|&w| w == 0.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matches_straight_line_reference() {
        for causal in [true, false] {
            let (enc, store) = toy(causal, 2, 2);
            let tokens = [7, 2, 2, 19, 0, 11, 5, 20];
            let mut g = Graph::new(&store);
            let out = enc.encode(&mut g, &tokens, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let expect = reference_encode(&enc, &store, &tokens);
            for (i, row) in expect.iter().enumerate() {
                for (a, b) in g.value(out.states).row_slice(i).iter().zip(row) {
                    assert!((a - b).abs() < 1e-12, "causal={causal}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads_and_overlong_input() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            hidden_size: 8,
            max_len: 4,
            layers: 1,
            heads: 3,
            dropout: 0.0,
            activation: Activation::Relu,
            causal: true,
            vocab: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransformerEncoder::new(&mut store, cfg.clone(), &mut rng).is_err());
        let enc = TransformerEncoder::new(&mut store, EncoderConfig { heads: 2, ..cfg }, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        assert!(enc.encode(&mut g, &[1, 2, 3, 4, 0], &mut rng).is_err());
    }
}
