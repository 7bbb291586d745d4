use std::collections::HashMap;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_raw, transpose_raw, Tensor};
use super::AutodiffError;

/// Additive surrogate for `-inf` used by [`Graph::masked_fill`].
pub const MASK_VALUE: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    LogSigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Embedding { table: Var, indices: Vec<usize> },
    Transpose(Var),
    MaskedFill { input: Var, mask: Vec<bool> },
    Dropout { input: Var, scale: Vec<f64> },
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Sum(Var),
    SumCols(Var),
    Pick { input: Var, index: Vec<usize> },
    SliceRows { input: Var, start: usize },
    Reshape(Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
/// Parameters are borrowed from a [`ParamStore`], never copied.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    train: bool,
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
}

impl<'p> Graph<'p> {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train: false,
        }
    }

    pub fn training(params: &'p ParamStore) -> Self {
        let mut g = Self::new(params);
        g.train = true;
        g
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.params.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        if tb.shape().len() > 2 || tb.rows() != k {
            return Err(AutodiffError::shape("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta, tb) {
            return Err(AutodiffError::shape(name, ta, tb));
        }
        let cols = ta.cols();
        let same = ta.shape() == tb.shape();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if same { tb.data()[i] } else { tb.data()[i % cols] };
                f(x, y)
            })
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op))
    }

    /// Elementwise sum; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    fn rowwise(&mut self, a: Var, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            f(src, dst);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, softmax_row, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.rowwise(
            a,
            |src, dst| {
                let lse = log_sum_exp(src);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            },
            Op::LogSoftmax(a),
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(t.rows());
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(AutodiffError::shape("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutodiffError::shape("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        let cols = t.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: i,
                    extent: t.rows(),
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(indices.len(), cols, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = Tensor::matrix(c, r, transpose_raw(t.data(), r, c)).expect("same size");
        self.push(out, Op::Transpose(a))
    }

    /// Replaces entries where `mask` is true by [`MASK_VALUE`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(AutodiffError::Shape {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { MASK_VALUE } else { x })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaskedFill {
                input: a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis after filling masked entries with
    /// [`MASK_VALUE`]. Rows with every entry masked come out as zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let filled = self.masked_fill(a, mask)?;
        let soft = self.softmax(filled);
        let t = self.value(a);
        let cols = t.cols();
        let dead: Vec<bool> = mask.chunks(cols).map(|r| r.iter().all(|&m| m)).collect();
        if !dead.iter().any(|&d| d) {
            return Ok(soft);
        }
        let keep: Vec<f64> = (0..t.len()).map(|i| if dead[i / cols] { 0.0 } else { 1.0 }).collect();
        let keep = self.constant(Tensor::new(t.shape().to_vec(), keep)?);
        self.mul(soft, keep)
    }

    /// Inverted dropout. The identity in evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let t = self.value(a);
        let scale: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { input: a, scale })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sum over the last axis, giving a `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums: Vec<f64> = t.data().chunks(t.cols()).map(|r| r.iter().sum()).collect();
        let n = sums.len();
        self.push(Tensor::matrix(n, 1, sums).expect("len"), Op::SumCols(a))
    }

    /// Selects `(row, col)` entries into a 1-D tensor.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut index = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(AutodiffError::Index {
                    op: "pick",
                    index: r * cols + c,
                    extent: rows * cols,
                });
            }
            index.push(r * cols + c);
        }
        let data = index.iter().map(|&i| t.data()[i]).collect::<Vec<_>>();
        let n = data.len();
        Ok(self.push(Tensor::new(vec![n], data)?, Op::Pick { input: a, index }))
    }

    /// Rows `start..end` of `a` as a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(AutodiffError::Index {
                op: "slice_rows",
                index: end,
                extent: t.rows(),
            });
        }
        let cols = t.cols();
        let data = t.data()[start * cols..end * cols].to_vec();
        Ok(self.push(
            Tensor::matrix(end - start, cols, data)?,
            Op::SliceRows { input: a, start },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())
            .map_err(|_| AutodiffError::shape("reshape", t, &Tensor::zeros(shape)))?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    ///
    /// The graph itself is not consumed; calling this twice yields the same
    /// gradients twice, and [`ParamStore::accumulate`] adds them up.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = match &node.value {
                Value::Owned(t) => t,
                Value::Param(id) => &self.params.get(*id).value,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    let bt = transpose_raw(tb.data(), k, m);
                    let ga = matmul_raw(&g, &bt, n, m, k);
                    let at = transpose_raw(ta.data(), n, k);
                    let gb = matmul_raw(&at, &g, k, n, m);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    acc(&mut grads, *a, &g);
                    let gb = reduce_broadcast(&g, self.value(*a), self.value(*b), |x| sign * x);
                    acc(&mut grads, *b, &gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let cols = ta.cols();
                    let same = ta.shape() == tb.shape();
                    let bval = |i: usize| if same { tb.data()[i] } else { tb.data()[i % cols] };
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect();
                    let prod: Vec<f64> = g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect();
                    let gb = reduce_broadcast(&prod, ta, tb, |x| x);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Affine(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, y.data(), |gi, yi| gi * yi * (1.0 - yi));
                    acc(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, y.data(), |gi, yi| gi * (1.0 - yi * yi));
                    acc(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x.data(), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x.data(), |gi, xi| gi * gelu_grad(xi));
                    acc(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x.data(), |gi, xi| gi / xi);
                    acc(&mut grads, *a, &ga);
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x.data(), |gi, xi| gi * sigmoid(-xi));
                    acc(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let cols = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let cols = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = gi - yi.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::LayerNorm { input, inv_std } => {
                    let cols = y.cols();
                    let n = cols as f64;
                    let mut ga = vec![0.0; g.len()];
                    for (r, ((gr, yr), dr)) in g
                        .chunks(cols)
                        .zip(y.data().chunks(cols))
                        .zip(ga.chunks_mut(cols))
                        .enumerate()
                    {
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] / n * (n * gi - sum_g - yi * sum_gy);
                        }
                    }
                    acc(&mut grads, *input, &ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = y.rows();
                    let total = y.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(&mut grads, *p, &gp);
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        acc(&mut grads, *p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Embedding { table, indices } => {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut gt = vec![0.0; t.len()];
                    for (row, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[row * cols + c];
                        }
                    }
                    acc(&mut grads, *table, &gt);
                }
                Op::Transpose(a) => {
                    // y is [c, r]
                    let ga = transpose_raw(&g, y.rows(), y.cols());
                    acc(&mut grads, *a, &ga);
                }
                Op::MaskedFill { input, mask } => {
                    let ga: Vec<f64> = g.iter().zip(mask).map(|(gi, &m)| if m { 0.0 } else { *gi }).collect();
                    acc(&mut grads, *input, &ga);
                }
                Op::Dropout { input, scale } => {
                    let ga = zip_map(&g, scale, |gi, s| gi * s);
                    acc(&mut grads, *input, &ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let t = self.value(*a);
                    let cols = t.cols();
                    let ga: Vec<f64> = (0..t.len()).map(|i| g[i / cols]).collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Pick { input, index } => {
                    let mut ga = vec![0.0; self.value(*input).len()];
                    for (gi, &i) in g.iter().zip(index) {
                        ga[i] += gi;
                    }
                    acc(&mut grads, *input, &ga);
                }
                Op::SliceRows { input, start } => {
                    let t = self.value(*input);
                    let cols = t.cols();
                    let mut ga = vec![0.0; t.len()];
                    ga[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    acc(&mut grads, *input, &ga);
                }
                Op::Reshape(a) => acc(&mut grads, *a, &g),
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Sums a gradient shaped like `a` down to the shape of `b` when `b` was
/// broadcast as a single row.
fn reduce_broadcast(g: &[f64], a: &Tensor, b: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        return g.iter().map(|&x| f(x)).collect();
    }
    let cols = a.cols();
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += f(*x);
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
