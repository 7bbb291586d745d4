use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_items, cross_entropy, score_with_logits, Architecture, LossReduction, ModelConfig, ModelError, NeuralModel,
    ScoreFunction,
};
use crate::autodiff::{Graph, HasParams, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub loss: LossReduction,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            embedding_size: 64,
            hidden_size: 64,
            loss: LossReduction::Sum,
        }
    }
}

/// Gated recurrent unit with biases, `h_0 = 0`.
///
/// ```text
/// z = sigmoid(x W_z + h R_z + b_z)
/// r = sigmoid(x W_r + h R_r + b_r)
/// h' = (1 - z) * h + z * tanh(x W_h + (r * h) R_h + b_h)
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub r_z: ParamId,
    pub r_r: ParamId,
    pub r_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |n: &str, rows: usize| store.add_uniform(format!("{prefix}.{n}"), &[rows, hidden], rng);
        let (w_z, w_r, w_h) = (w("w_z", input), w("w_r", input), w("w_h", input));
        let (r_z, r_r, r_h) = (w("r_z", hidden), w("r_r", hidden), w("r_h", hidden));
        Self {
            w_z,
            w_r,
            w_h,
            r_z,
            r_r,
            r_h,
            b_z: store.add_zeros(format!("{prefix}.b_z"), &[hidden]),
            b_r: store.add_zeros(format!("{prefix}.b_r"), &[hidden]),
            b_h: store.add_zeros(format!("{prefix}.b_h"), &[hidden]),
            hidden_size: hidden,
        }
    }

    fn input_projection(&self, g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let w = g.param(w);
        let b = g.param(b);
        let xw = g.matmul(x, w)?;
        Ok(g.add(xw, b)?)
    }

    /// Hidden states for every row of `x` (`[t, input]`), as a `[t, hidden]` matrix.
    pub fn run(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, ModelError> {
        let steps = g.value(x).rows();
        let xz = self.input_projection(g, x, self.w_z, self.b_z)?;
        let xr = self.input_projection(g, x, self.w_r, self.b_r)?;
        let xh = self.input_projection(g, x, self.w_h, self.b_h)?;
        let (r_z, r_r, r_h) = (g.param(self.r_z), g.param(self.r_r), g.param(self.r_h));
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden_size]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xz_t = g.slice_rows(xz, t, t + 1)?;
            let xr_t = g.slice_rows(xr, t, t + 1)?;
            let xh_t = g.slice_rows(xh, t, t + 1)?;
            let hz = g.matmul(h, r_z)?;
            let z_in = g.add(xz_t, hz)?;
            let z = g.sigmoid(z_in);
            let hr = g.matmul(h, r_r)?;
            let r_in = g.add(xr_t, hr)?;
            let r = g.sigmoid(r_in);
            let rh = g.mul(r, h)?;
            let rh = g.matmul(rh, r_h)?;
            let c_in = g.add(xh_t, rh)?;
            let cand = g.tanh(c_in);
            let keep = g.affine(z, -1.0, 1.0);
            let old = g.mul(keep, h)?;
            let new = g.mul(z, cand)?;
            h = g.add(old, new)?;
            states.push(h);
        }
        Ok(g.concat_rows(&states)?)
    }
}

/// GRU encoder with a separate output layer over the catalog.
#[derive(Clone, Debug)]
pub struct Gru {
    name: String,
    config: GruConfig,
    num_items: usize,
    store: ParamStore,
    embedding: ParamId,
    cell: GruCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        num_items: usize,
        config: GruConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if num_items == 0 || config.embedding_size == 0 || config.hidden_size == 0 {
            return Err(ModelError::InvalidConfig("GRU sizes must be positive".into()));
        }
        let mut store = ParamStore::new();
        let embedding = store.add_uniform("embedding", &[num_items, config.embedding_size], rng);
        let cell = GruCell::new(&mut store, "gru", config.embedding_size, config.hidden_size, rng);
        let out_w = store.add_uniform("output.weight", &[config.hidden_size, num_items], rng);
        let out_b = store.add_zeros("output.bias", &[num_items]);
        Ok(Self {
            name: name.to_string(),
            config,
            num_items,
            store,
            embedding,
            cell,
            out_w,
            out_b,
        })
    }

    pub fn cell(&self) -> &GruCell {
        &self.cell
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    /// Hidden states `[t, d]` after each item of `items`.
    pub fn hidden_states(&self, g: &mut Graph<'_>, items: &[usize]) -> Result<Var, ModelError> {
        let table = g.param(self.embedding);
        let x = g.embedding(table, items)?;
        self.cell.run(g, x)
    }

    fn project(&self, g: &mut Graph<'_>, h: Var) -> Result<Var, ModelError> {
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let o = g.matmul(h, w)?;
        Ok(g.add(o, b)?)
    }
}

impl HasParams for Gru {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ScoreFunction for Gru {
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

impl NeuralModel for Gru {
    fn architecture(&self) -> Architecture {
        Architecture::Gru
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn logits(&self, g: &mut Graph<'_>, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let h = self.hidden_states(g, prefix)?;
        let t = g.value(h).rows();
        let last = g.slice_rows(h, t - 1, t)?;
        self.project(g, last)
    }

    /// Next-item cross-entropy over every prefix of every sequence.
    fn training_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&[usize]],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError> {
        let mut states = Vec::new();
        let mut targets = Vec::new();
        for seq in batch.iter().filter(|s| s.len() >= 2) {
            check_items(seq, self.num_items)?;
            let h = self.hidden_states(g, &seq[..seq.len() - 1])?;
            for &next in &seq[1..] {
                targets.push((targets.len(), next));
            }
            states.push(h);
        }
        if states.is_empty() {
            return Ok(None);
        }
        let h = g.concat_rows(&states)?;
        let logits = self.project(g, h)?;
        Ok(Some(cross_entropy(g, logits, &targets, self.config.loss)?))
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Gru(self.config.clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::SeedableRng;

    pub(crate) fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `v` (row) times `m` (`rows x cols`, row-major).
    pub(crate) fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
        let (rows, cols) = (m.rows(), m.cols());
        assert_eq!(v.len(), rows);
        (0..cols).map(|c| (0..rows).map(|r| v[r] * m.get(r, c)).sum()).collect()
    }

    /// Independent step-by-step GRU over raw parameter values.
    pub(crate) fn reference_gru(store: &ParamStore, cell: &GruCell, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p = |id: ParamId| &store.get(id).value;
        let d = cell.hidden_size;
        let mut h = vec![0.0; d];
        let mut out = Vec::new();
        for x in inputs {
            let (xz, xr, xh) = (vecmat(x, p(cell.w_z)), vecmat(x, p(cell.w_r)), vecmat(x, p(cell.w_h)));
            let (hz, hr) = (vecmat(&h, p(cell.r_z)), vecmat(&h, p(cell.r_r)));
            let z: Vec<f64> = (0..d).map(|j| sig(xz[j] + hz[j] + p(cell.b_z).data()[j])).collect();
            let r: Vec<f64> = (0..d).map(|j| sig(xr[j] + hr[j] + p(cell.b_r).data()[j])).collect();
            let rh: Vec<f64> = (0..d).map(|j| r[j] * h[j]).collect();
            let rhr = vecmat(&rh, p(cell.r_h));
            let cand: Vec<f64> = (0..d)
                .map(|j| (xh[j] + rhr[j] + p(cell.b_h).data()[j]).tanh())
                .collect();
            h = (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
            out.push(h.clone());
        }
        out
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
    }

    fn toy(seed: u64) -> Gru {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GruConfig {
            embedding_size: 8,
            hidden_size: 8,
            loss: LossReduction::Sum,
        };
        let mut m = Gru::new("gru", 20, cfg, &mut rng).unwrap();
        randomize(&mut m.store, seed + 1);
        m
    }

    #[test]
    fn zero_network_gives_uniform_scores() {
        let mut m = toy(1);
        for p in m.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = m.score(&[1, 2, 3], &[0, 5, 9]).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_step_has_closed_form() {
        let m = toy(2);
        let mut g = Graph::new(&m.store);
        let h = m.hidden_states(&mut g, &[4]).unwrap();
        let e = m.store.get(m.embedding).value.row_slice(4).to_vec();
        let p = |id| &m.store.get(id).value;
        let xz = vecmat(&e, p(m.cell.w_z));
        let xh = vecmat(&e, p(m.cell.w_h));
        for j in 0..8 {
            let z = sig(xz[j] + p(m.cell.b_z).data()[j]);
            let expect = z * (xh[j] + p(m.cell.b_h).data()[j]).tanh();
            assert!((g.value(h).data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_straight_line_reference() {
        let m = toy(3);
        let prefix = [3, 7, 7, 1, 19];
        let mut g = Graph::new(&m.store);
        let logits = m.logits(&mut g, &prefix).unwrap();
        let inputs: Vec<Vec<f64>> = prefix
            .iter()
            .map(|&i| m.store.get(m.embedding).value.row_slice(i).to_vec())
            .collect();
        let h = reference_gru(&m.store, &m.cell, &inputs);
        let o = vecmat(h.last().unwrap(), &m.store.get(m.out_w).value);
        let b = m.store.get(m.out_b).value.data();
        for (j, v) in g.value(logits).data().iter().enumerate() {
            assert!((v - (o[j] + b[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_log_sum_exp_reference() {
        let m = toy(4);
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![5, 0], vec![9]];
        let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new(&m.store);
        let loss = m
            .training_loss(&mut g, &refs, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .unwrap();
        let mut expect = 0.0;
        for seq in &batch {
            if seq.len() < 2 {
                continue;
            }
            let inputs: Vec<Vec<f64>> = seq
                .iter()
                .map(|&i| m.store.get(m.embedding).value.row_slice(i).to_vec())
                .collect();
            let hs = reference_gru(&m.store, &m.cell, &inputs);
            for t in 0..seq.len() - 1 {
                let o: Vec<f64> = vecmat(&hs[t], &m.store.get(m.out_w).value)
                    .iter()
                    .zip(m.store.get(m.out_b).value.data())
                    .map(|(a, b)| a + b)
                    .collect();
                let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + o.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                expect += lse - o[seq[t + 1]];
            }
        }
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = toy(5);
        let batch: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![5, 0, 7], vec![9, 9, 2], vec![11, 12, 13, 14, 15]];
        let report = gradient_check(&mut m, 1e-5, |m: &Gru, g: &mut Graph| -> Result<Var, ModelError> {
            let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
            Ok(m.training_loss(g, &refs, &mut ChaCha8Rng::seed_from_u64(0))?.unwrap())
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn scores_depend_only_on_the_prefix() {
        let m = toy(6);
        let a = m.score(&[1, 2, 3], &[4, 5]).unwrap();
        let mut g = Graph::new(&m.store);
        let h = m.hidden_states(&mut g, &[1, 2, 3, 8, 9]).unwrap();
        let h3 = g.slice_rows(h, 2, 3).unwrap();
        let o = m.project(&mut g, h3).unwrap();
        assert_eq!(a, vec![g.value(o).data()[4], g.value(o).data()[5]]);
    }

    #[test]
    fn empty_prefix_is_rejected() {
        assert!(matches!(toy(7).score(&[], &[1]), Err(ModelError::EmptyPrefix)));
    }
}
