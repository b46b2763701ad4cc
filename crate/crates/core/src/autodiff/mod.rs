//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! Every tensor is a dense 2-D `f64` array. Building an op records the node
//! on the graph and computes its value eagerly; `backward` then walks the
//! tape in reverse, accumulating gradients into every node that (directly or
//! through its inputs) depends on a parameter leaf. Graphs are cheap,
//! throwaway objects: one per forward/backward pass.
//!
//! Parameters enter as `Arc<Array2<f64>>` leaves so a graph never copies
//! them; constants (inputs, targets, masks) enter with gradients disabled.

pub mod gradcheck;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_check, GradReport};
pub use optim::{cosine_lr, AdamState, AdamW, OptimConfig};
pub use params::{Checkpoint, ModelParams, ParamEntry};

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const LAYERNORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Value {
    fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Shared(a) => a.view(),
        }
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Affine { x: Var, mul: f64 },
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SoftmaxCols { x: Var, group_rows: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    GatherTable { x: Var, table: Arc<Vec<usize>> },
    GatherCols { x: Var, index: Arc<Vec<usize>> },
    GatherRows { x: Var, index: Arc<Vec<usize>> },
    AddConst(Var),
    MulConst(Var, Arc<Array2<f64>>),
    MeanRows { x: Var, group_rows: usize },
    RowProd(Var),
    SumAll(Var),
    BceLogits { logits: Var, targets: Arc<Array2<f64>> },
    BceProbs { probs: Var, targets: Arc<Array2<f64>> },
    CosineSim(Var),
    Mha { q: Var, k: Var, v: Var, probs: Vec<Array2<f64>>, heads: usize },
    GroupedMlp { x: Var, weights: Vec<Var>, group_rows: usize, pre: Vec<Array2<f64>>, tanh_u: Vec<Array2<f64>> },
    BlockMatmul { a: Var, b: Var, blocks: usize },
    BlockMatmulT { a: Var, b: Var, blocks: usize },
    GroupCosinePenalty { x: Var, group_rows: usize, weights: Arc<Array2<f64>>, scale: f64 },
}

fn fast_tanh(u: f64) -> f64 {
    // Same function as u.tanh() (overflow saturates to the correct limit)
    // but roughly twice as fast through libm's exp.
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_inner_tanh(v: f64) -> f64 {
    fast_tanh(SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v))
}

fn gelu_from_tanh(v: f64, t: f64) -> f64 {
    0.5 * v * (1.0 + t)
}

fn gelu_grad_from_tanh(v: f64, t: f64) -> f64 {
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

fn gelu_scalar(v: f64) -> f64 {
    gelu_from_tanh(v, gelu_inner_tanh(v))
}

fn gelu_grad_scalar(v: f64) -> f64 {
    gelu_grad_from_tanh(v, gelu_inner_tanh(v))
}

fn mha_head(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    mask: &Array2<f64>,
    head: usize,
    dh: usize,
) -> Array2<f64> {
    let qh = q.slice(ndarray::s![.., head * dh..(head + 1) * dh]);
    let kh = k.slice(ndarray::s![.., head * dh..(head + 1) * dh]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = qh.dot(&kh.t());
    probs.mapv_inplace(|v| v * scale);
    probs += mask;
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Pairwise cosine similarities between rows, with near-zero norms floored.
fn cosine_matrix(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut gram = x.dot(&x.t());
    let norms: Vec<f64> =
        (0..x.nrows()).map(|i| gram[[i, i]].sqrt().max(NORM_FLOOR)).collect();
    for ((i, j), v) in gram.indexed_iter_mut() {
        *v /= norms[i] * norms[j];
    }
    gram
}

/// Gradient of a cosine-similarity matrix S(x) contracted with dL/dS = g:
/// dX = P.X - diag(q/n^2).X with P_ab = (g_ab + g_ba)/(n_a n_b) and
/// q_a = sum_b (g_ab + g_ba) S_ab.
fn cosine_backward(x: &ArrayView2<f64>, sim: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Array2<f64> {
    let s = x.nrows();
    let norms: Vec<f64> =
        x.rows().into_iter().map(|r| r.dot(&r).sqrt().max(NORM_FLOOR)).collect();
    let mut p = Array2::zeros((s, s));
    let mut q = vec![0.0; s];
    for a in 0..s {
        for b in 0..s {
            let coeff = g[[a, b]] + g[[b, a]];
            p[[a, b]] = coeff / (norms[a] * norms[b]);
            q[a] += coeff * sim[[a, b]];
        }
    }
    let mut dx = p.dot(x);
    for (a, mut row) in dx.rows_mut().into_iter().enumerate() {
        let qa = q[a] / (norms[a] * norms[a]);
        row.zip_mut_with(&x.row(a), |d, &xv| *d -= qa * xv);
    }
    dx
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::config(format!("shape mismatch in {op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf sharing storage with the caller; receives a gradient.
    pub fn param(&mut self, value: &Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(Arc::clone(value)),
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.view();
        (d.nrows(), d.ncols())
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", format!("{ar}x{ac} . {br}x{bc}")));
        }
        let value = self.value(a).dot(&self.value(b));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = &self.value(a) + &self.value(b);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a 1 x c row vector to every row of a.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {rr}x{rc}", self.shape(a)),
            ));
        }
        let value = &self.value(a) + &self.value(row);
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms.first().ok_or_else(|| shape_err("add_n", "empty term list".into()))?;
        let shape = self.shape(first);
        let mut value = self.value(first).to_owned();
        let mut rg = self.requires(first);
        for &t in &terms[1..] {
            if self.shape(t) != shape {
                return Err(shape_err("add_n", format!("{shape:?} + {:?}", self.shape(t))));
            }
            value += &self.value(t);
            rg |= self.requires(t);
        }
        Ok(self.push(value, Op::AddN(terms.to_vec()), rg))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = self.value(x).mapv(|v| v * mul + add);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Affine { x, mul }, rg))
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Result<Var> {
        self.affine(x, mul, 0.0)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).mapv(gelu_scalar);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.requires(x);
        Ok(self.push(value, Op::Sigmoid(x), rg))
    }

    /// Softmax normalizing each row to sum 1, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).to_owned();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Softmax normalizing each column to sum 1.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.shape(x);
        self.group_softmax_cols(x, r)
    }

    /// Column softmax applied independently within each consecutive block of
    /// `group_rows` rows, so stacked samples normalize over their own rows.
    pub fn group_softmax_cols(&mut self, x: Var, group_rows: usize) -> Result<Var> {
        let (r, _) = self.shape(x);
        if group_rows == 0 || r % group_rows != 0 {
            return Err(shape_err(
                "group_softmax_cols",
                format!("{r} rows not divisible into blocks of {group_rows}"),
            ));
        }
        let mut value = self.value(x).to_owned();
        for mut block in value.axis_chunks_iter_mut(Axis(0), group_rows) {
            for mut col in block.axis_iter_mut(Axis(1)) {
                let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                col.mapv_inplace(|v| (v - max).exp());
                let sum = col.sum();
                col.mapv_inplace(|v| v / sum);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::SoftmaxCols { x, group_rows }, rg))
    }

    /// Per-row layer normalization with learned gain and bias (both 1 x c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut value = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = (v - mean) * inv * gv[[0, j]] + bv[[0, j]];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).t().to_owned();
        let rg = self.requires(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.shape(x);
        if start + len > r {
            return Err(shape_err(
                "slice_rows",
                format!("rows [{start}, {}) of {:?}", start + len, self.shape(x)),
            ));
        }
        let value = self.value(x).slice(ndarray::s![start..start + len, ..]).to_owned();
        let rg = self.requires(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(x);
        if start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("cols [{start}, {}) of {:?}", start + len, self.shape(x)),
            ));
        }
        let value = self.value(x).slice(ndarray::s![.., start..start + len]).to_owned();
        let rg = self.requires(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("hstack", "empty part list".into()))?;
        let rows = self.shape(first).0;
        let mut views = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("hstack", format!("{rows} rows vs {:?}", self.shape(p))));
            }
            rg |= self.requires(p);
            views.push(self.value(p));
        }
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("hstack", e.to_string()))?;
        Ok(self.push(value, Op::HStack(parts.to_vec()), rg))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("vstack", "empty part list".into()))?;
        let cols = self.shape(first).1;
        let mut views = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(shape_err("vstack", format!("{cols} cols vs {:?}", self.shape(p))));
            }
            rg |= self.requires(p);
            views.push(self.value(p));
        }
        let value = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| shape_err("vstack", e.to_string()))?;
        Ok(self.push(value, Op::VStack(parts.to_vec()), rg))
    }

    /// Gathers from a 1 x k source into an (table.len()/cols) x cols matrix:
    /// out[i][j] = x[0][table[i*cols + j]]. The backward pass scatter-adds.
    pub fn gather_table(&mut self, x: Var, table: Arc<Vec<usize>>, cols: usize) -> Result<Var> {
        let (r, k) = self.shape(x);
        if r != 1 || cols == 0 || table.len() % cols != 0 {
            return Err(shape_err(
                "gather_table",
                format!("source {r}x{k}, table len {} with {cols} cols", table.len()),
            ));
        }
        if let Some(&bad) = table.iter().find(|&&i| i >= k) {
            return Err(shape_err("gather_table", format!("index {bad} out of range {k}")));
        }
        let rows = table.len() / cols;
        let xv = self.value(x);
        let mut value = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                value[[i, j]] = xv[[0, table[i * cols + j]]];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::GatherTable { x, table }, rg))
    }

    /// Gathers columns of a 1 x k row into a 1 x index.len() row.
    pub fn gather_cols(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (r, k) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(shape_err("gather_cols", format!("index {bad} out of range {k}")));
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((r, index.len()));
        for (j, &src) in index.iter().enumerate() {
            value.column_mut(j).assign(&xv.column(src));
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::GatherCols { x, index }, rg))
    }

    /// Row gather: output row i is `x` row `index[i]`. Repeated indices tile
    /// rows; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("index {bad} out of range {r}")));
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((index.len(), c));
        for (i, &src) in index.iter().enumerate() {
            value.row_mut(i).assign(&xv.row(src));
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::GatherRows { x, index }, rg))
    }

    /// Block-diagonal product: with `a` as `blocks` stacked ra x m matrices
    /// and `b` as `blocks` stacked m x cb matrices, output block i is
    /// a_i . b_i, stacked.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (ar, m) = self.shape(a);
        let (br, cb) = self.shape(b);
        if blocks == 0 || ar % blocks != 0 || br != blocks * m {
            return Err(shape_err(
                "block_matmul",
                format!("a {ar}x{m}, b {br}x{cb} in {blocks} blocks"),
            ));
        }
        let ra = ar / blocks;
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = Array2::zeros((ar, cb));
        for i in 0..blocks {
            let ab = av.slice(ndarray::s![i * ra..(i + 1) * ra, ..]);
            let bb = bv.slice(ndarray::s![i * m..(i + 1) * m, ..]);
            value.slice_mut(ndarray::s![i * ra..(i + 1) * ra, ..]).assign(&ab.dot(&bb));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::BlockMatmul { a, b, blocks }, rg))
    }

    /// Like block_matmul but each a-block enters transposed: with `a` as
    /// `blocks` stacked r x ca matrices and `b` as `blocks` stacked r x cb
    /// matrices, output block i is a_iᵀ . b_i.
    pub fn block_matmul_t(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (ar, ca) = self.shape(a);
        let (br, cb) = self.shape(b);
        if blocks == 0 || ar % blocks != 0 || br != ar {
            return Err(shape_err(
                "block_matmul_t",
                format!("a {ar}x{ca}, b {br}x{cb} in {blocks} blocks"),
            ));
        }
        let r = ar / blocks;
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = Array2::zeros((blocks * ca, cb));
        for i in 0..blocks {
            let ab = av.slice(ndarray::s![i * r..(i + 1) * r, ..]);
            let bb = bv.slice(ndarray::s![i * r..(i + 1) * r, ..]);
            value.slice_mut(ndarray::s![i * ca..(i + 1) * ca, ..]).assign(&ab.t().dot(&bb));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::BlockMatmulT { a, b, blocks }, rg))
    }

    /// Weighted sum of pairwise cosine similarities within each block of
    /// `group_rows` rows of x, summed over blocks and scaled into a scalar:
    /// scale * sum_g sum_{a,b} weights[a,b] cos(x_g[a], x_g[b]).
    pub fn group_cosine_penalty(
        &mut self,
        x: Var,
        group_rows: usize,
        weights: Arc<Array2<f64>>,
        scale: f64,
    ) -> Result<Var> {
        let (r, _) = self.shape(x);
        if group_rows == 0 || r % group_rows != 0 {
            return Err(shape_err(
                "group_cosine_penalty",
                format!("{r} rows not divisible into blocks of {group_rows}"),
            ));
        }
        if (weights.nrows(), weights.ncols()) != (group_rows, group_rows) {
            return Err(shape_err(
                "group_cosine_penalty",
                format!(
                    "weights {}x{} for blocks of {group_rows}",
                    weights.nrows(),
                    weights.ncols()
                ),
            ));
        }
        let xv = self.value(x);
        let mut total = 0.0;
        for block in xv.axis_chunks_iter(Axis(0), group_rows) {
            let sim = cosine_matrix(&block);
            for (w, s) in weights.iter().zip(sim.iter()) {
                total += w * s;
            }
        }
        let value = Array2::from_elem((1, 1), total * scale);
        let rg = self.requires(x);
        Ok(self.push(value, Op::GroupCosinePenalty { x, group_rows, weights, scale }, rg))
    }

    /// Adds a constant matrix (an attention mask, say) that never receives
    /// gradient.
    pub fn add_const(&mut self, x: Var, c: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(x) != (c.nrows(), c.ncols()) {
            return Err(shape_err(
                "add_const",
                format!("{:?} + {}x{}", self.shape(x), c.nrows(), c.ncols()),
            ));
        }
        let value = &self.value(x) + &c.view();
        let rg = self.requires(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(x) != (c.nrows(), c.ncols()) {
            return Err(shape_err(
                "mul_const",
                format!("{:?} * {}x{}", self.shape(x), c.nrows(), c.ncols()),
            ));
        }
        let value = &self.value(x) * &c.view();
        let rg = self.requires(x);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    /// Mean over rows: r x c -> 1 x c.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.shape(x);
        self.group_mean_rows(x, r)
    }

    /// Row mean within each consecutive block of `group_rows` rows, one
    /// output row per block.
    pub fn group_mean_rows(&mut self, x: Var, group_rows: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group_rows == 0 || r % group_rows != 0 {
            return Err(shape_err(
                "group_mean_rows",
                format!("{r} rows not divisible into blocks of {group_rows}"),
            ));
        }
        let xv = self.value(x);
        let blocks = r / group_rows;
        let mut value = Array2::zeros((blocks, c));
        for (i, block) in xv.axis_chunks_iter(Axis(0), group_rows).enumerate() {
            value.row_mut(i).assign(&block.mean_axis(Axis(0)).unwrap());
        }
        let rg = self.requires(x);
        Ok(self.push(value, Op::MeanRows { x, group_rows }, rg))
    }

    /// Per-row product of entries: r x w -> r x 1.
    pub fn row_prod(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.shape(x);
        let xv = self.value(x);
        let value = Array2::from_shape_fn((r, 1), |(i, _)| xv.row(i).iter().product());
        let rg = self.requires(x);
        Ok(self.push(value, Op::RowProd(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.requires(x);
        Ok(self.push(value, Op::SumAll(x), rg))
    }

    /// Mean binary cross-entropy between logits and fixed 0/1 targets,
    /// computed in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(logits) != (targets.nrows(), targets.ncols()) {
            return Err(shape_err(
                "bce_with_logits",
                format!(
                    "logits {:?} vs targets {}x{}",
                    self.shape(logits),
                    targets.nrows(),
                    targets.ncols()
                ),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (z, &t) in lv.iter().zip(targets.iter()) {
            total += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        }
        let value = Array2::from_elem((1, 1), total / lv.len() as f64);
        let rg = self.requires(logits);
        Ok(self.push(value, Op::BceLogits { logits, targets }, rg))
    }

    /// Mean binary cross-entropy between probabilities and fixed targets.
    pub fn bce_with_probs(&mut self, probs: Var, targets: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(probs) != (targets.nrows(), targets.ncols()) {
            return Err(shape_err(
                "bce_with_probs",
                format!(
                    "probs {:?} vs targets {}x{}",
                    self.shape(probs),
                    targets.nrows(),
                    targets.ncols()
                ),
            ));
        }
        let pv = self.value(probs);
        let mut total = 0.0;
        for (p, &t) in pv.iter().zip(targets.iter()) {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let value = Array2::from_elem((1, 1), total / pv.len() as f64);
        let rg = self.requires(probs);
        Ok(self.push(value, Op::BceProbs { probs, targets }, rg))
    }

    /// Pairwise cosine similarity of the rows of x: (s x d) -> (s x s).
    /// Norms are floored at 1e-12 so zero rows stay finite.
    pub fn cosine_sim(&mut self, x: Var) -> Result<Var> {
        let value = cosine_matrix(&self.value(x));
        let rg = self.requires(x);
        Ok(self.push(value, Op::CosineSim(x), rg))
    }

    /// Fused masked multi-head attention over pre-projected q, k, v (each
    /// r x d with d split into `heads` equal slices): per head, softmax rows
    /// of (q_h k_hᵀ / sqrt(d_h) + mask) weight the v_h rows, and head outputs
    /// are concatenated. When r is a multiple of the mask size n, the rows
    /// are treated as stacked n-row samples attending only within their own
    /// sample. The softmax probabilities are kept for the backward pass.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<Array2<f64>>,
        heads: usize,
    ) -> Result<Var> {
        let (r, d) = self.shape(q);
        if self.shape(k) != (r, d) || self.shape(v) != (r, d) {
            return Err(shape_err(
                "multi_head_attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        let n = mask.nrows();
        if mask.ncols() != n || n == 0 || r % n != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("mask {}x{} for {r} rows", n, mask.ncols()),
            ));
        }
        let groups = r / n;
        let dh = d / heads;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Array2::zeros((r, d));
        let mut probs = Vec::with_capacity(groups * heads);
        for gi in 0..groups {
            let rows = ndarray::s![gi * n..(gi + 1) * n, ..];
            let qg = qv.slice(rows);
            let kg = kv.slice(rows);
            let vg = vv.slice(rows);
            for h in 0..heads {
                let p = mha_head(&qg, &kg, &mask, h, dh);
                let vh = vg.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                out.slice_mut(ndarray::s![gi * n..(gi + 1) * n, h * dh..(h + 1) * dh])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(out, Op::Mha { q, k, v, probs, heads }, rg))
    }

    /// Fused bank of 2-layer GELU MLPs: rows of x are split into consecutive
    /// groups of `group_rows`, and group e is mapped through its own
    /// (w1, b1, w2, b2) quadruple from `weights`. One node instead of ~5 per
    /// group; the backward pass recomputes each group's hidden activations.
    pub fn grouped_mlp(
        &mut self,
        x: Var,
        weights: &[[Var; 4]],
        group_rows: usize,
    ) -> Result<Var> {
        let (s, d) = self.shape(x);
        if group_rows == 0 || s != weights.len() * group_rows {
            return Err(shape_err(
                "grouped_mlp",
                format!("{s} rows for {} groups of {group_rows}", weights.len()),
            ));
        }
        let mut rg = self.requires(x);
        for (e, &[w1, b1, w2, b2]) in weights.iter().enumerate() {
            let (dw, h) = self.shape(w1);
            if dw != d
                || self.shape(b1) != (1, h)
                || self.shape(w2) != (h, d)
                || self.shape(b2) != (1, d)
            {
                return Err(shape_err(
                    "grouped_mlp",
                    format!(
                        "group {e}: x cols {d}, w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                        self.shape(w1),
                        self.shape(b1),
                        self.shape(w2),
                        self.shape(b2)
                    ),
                ));
            }
            rg |= self.requires(w1) || self.requires(b1) || self.requires(w2) || self.requires(b2);
        }
        let xv = self.value(x);
        let mut out = Array2::zeros((s, d));
        let mut pre = Vec::with_capacity(weights.len());
        let mut tanh_u = Vec::with_capacity(weights.len());
        for (e, &[w1, b1, w2, b2]) in weights.iter().enumerate() {
            let rows = xv.slice(ndarray::s![e * group_rows..(e + 1) * group_rows, ..]);
            let mut p = rows.dot(&self.value(w1));
            p += &self.value(b1);
            let t = p.mapv(gelu_inner_tanh);
            let mut hidden = p.clone();
            hidden.zip_mut_with(&t, |h, &tv| *h = gelu_from_tanh(*h, tv));
            let mut y = hidden.dot(&self.value(w2));
            y += &self.value(b2);
            out.slice_mut(ndarray::s![e * group_rows..(e + 1) * group_rows, ..]).assign(&y);
            pre.push(p);
            tanh_u.push(t);
        }
        let flat: Vec<Var> = weights.iter().flatten().copied().collect();
        Ok(self.push(out, Op::GroupedMlp { x, weights: flat, group_rows, pre, tanh_u }, rg))
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulates d(loss)/d(node) into every gradient-requiring node.
    /// `loss` must be 1 x 1. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let v = self.value(loss)[[0, 0]];
        if !v.is_finite() {
            return Err(Error::numerical(format!("loss is not finite ({v})")));
        }
        // Working gradients for this pass; merged into self.grads at the end
        // so earlier passes are preserved (accumulation semantics).
        let mut work: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(gout) = work[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gout, &mut work);
                match &mut self.grads[i] {
                    Some(acc) => *acc += &gout,
                    slot => *slot = Some(gout),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &Array2<f64>, work: &mut [Option<Array2<f64>>]) {
        let add = |work: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut work[v.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                add(work, *a, gout.dot(&bv.t()));
                add(work, *b, av.t().dot(gout));
            }
            Op::Add(a, b) => {
                add(work, *a, gout.clone());
                add(work, *b, gout.clone());
            }
            Op::AddRow(a, row) => {
                add(work, *a, gout.clone());
                let summed = gout.sum_axis(Axis(0)).into_shape_with_order((1, gout.ncols())).unwrap();
                add(work, *row, summed);
            }
            Op::AddN(terms) => {
                for &t in terms {
                    add(work, t, gout.clone());
                }
            }
            Op::Affine { x, mul } => {
                add(work, *x, gout.mapv(|g| g * mul));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut g = gout.clone();
                g.zip_mut_with(&xv, |gi, &v| *gi *= gelu_grad_scalar(v));
                add(work, *x, g);
            }
            Op::Sigmoid(x) => {
                let yv = self.value(Var(i));
                let g = gout * &yv.mapv(|y| y * (1.0 - y));
                add(work, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let yv = self.value(Var(i));
                let mut g = Array2::zeros(gout.raw_dim());
                for r in 0..yv.nrows() {
                    let y = yv.row(r);
                    let go = gout.row(r);
                    let dot = y.dot(&go);
                    for c in 0..yv.ncols() {
                        g[[r, c]] = y[c] * (go[c] - dot);
                    }
                }
                add(work, *x, g);
            }
            Op::SoftmaxCols { x, group_rows } => {
                let yv = self.value(Var(i));
                let mut g = Array2::zeros(gout.raw_dim());
                for (bi, yb) in yv.axis_chunks_iter(Axis(0), *group_rows).enumerate() {
                    let base = bi * group_rows;
                    for c in 0..yb.ncols() {
                        let y = yb.column(c);
                        let go = gout.slice(ndarray::s![base..base + group_rows, c]);
                        let dot = y.dot(&go);
                        for r in 0..y.len() {
                            g[[base + r, c]] = y[r] * (go[r] - dot);
                        }
                    }
                }
                add(work, *x, g);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.ncols() as f64;
                let mut gx = Array2::zeros(xv.raw_dim());
                let mut ggain = Array2::zeros((1, xv.ncols()));
                let mut gbias = Array2::zeros((1, xv.ncols()));
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let go = gout.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let dxhat = go[j] * gv[[0, j]];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[j];
                        ggain[[0, j]] += go[j] * xhat[j];
                        gbias[[0, j]] += go[j];
                    }
                    mean_dxhat /= c;
                    mean_dxhat_xhat /= c;
                    for j in 0..xv.ncols() {
                        let dxhat = go[j] * gv[[0, j]];
                        gx[[r, j]] = inv * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                add(work, *x, gx);
                add(work, *gain, ggain);
                add(work, *bias, gbias);
            }
            Op::Transpose(x) => {
                add(work, *x, gout.t().to_owned());
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                g.slice_mut(ndarray::s![*start..*start + gout.nrows(), ..]).assign(gout);
                add(work, *x, g);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                g.slice_mut(ndarray::s![.., *start..*start + gout.ncols()]).assign(gout);
                add(work, *x, g);
            }
            Op::HStack(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let g = gout.slice(ndarray::s![.., at..at + w]).to_owned();
                    add(work, p, g);
                    at += w;
                }
            }
            Op::VStack(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    let g = gout.slice(ndarray::s![at..at + h, ..]).to_owned();
                    add(work, p, g);
                    at += h;
                }
            }
            Op::GatherTable { x, table } => {
                let (_, k) = self.shape(*x);
                let cols = gout.ncols();
                let mut g = Array2::zeros((1, k));
                for i2 in 0..gout.nrows() {
                    for j in 0..cols {
                        g[[0, table[i2 * cols + j]]] += gout[[i2, j]];
                    }
                }
                add(work, *x, g);
            }
            Op::GatherCols { x, index } => {
                let (r, k) = self.shape(*x);
                let mut g = Array2::zeros((r, k));
                for (j, &src) in index.iter().enumerate() {
                    for row in 0..r {
                        g[[row, src]] += gout[[row, j]];
                    }
                }
                add(work, *x, g);
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                for (i_out, &src) in index.iter().enumerate() {
                    let mut dst = g.row_mut(src);
                    dst += &gout.row(i_out);
                }
                add(work, *x, g);
            }
            Op::AddConst(x) => {
                add(work, *x, gout.clone());
            }
            Op::MulConst(x, c) => {
                add(work, *x, gout * &c.view());
            }
            Op::MeanRows { x, group_rows } => {
                let (r, c) = self.shape(*x);
                let scale = 1.0 / *group_rows as f64;
                let mut g = Array2::zeros((r, c));
                for (ri, mut row) in g.rows_mut().into_iter().enumerate() {
                    row.assign(&gout.row(ri / group_rows));
                    row.mapv_inplace(|v| v * scale);
                }
                add(work, *x, g);
            }
            Op::RowProd(x) => {
                let xv = self.value(*x);
                let w = xv.ncols();
                let mut g = Array2::zeros(xv.raw_dim());
                let mut prefix = vec![1.0; w + 1];
                let mut suffix = vec![1.0; w + 1];
                for i in 0..xv.nrows() {
                    for j in 0..w {
                        prefix[j + 1] = prefix[j] * xv[[i, j]];
                    }
                    suffix[w] = 1.0;
                    for j in (0..w).rev() {
                        suffix[j] = suffix[j + 1] * xv[[i, j]];
                    }
                    let go = gout[[i, 0]];
                    for j in 0..w {
                        g[[i, j]] = go * prefix[j] * suffix[j + 1];
                    }
                }
                add(work, *x, g);
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                add(work, *x, Array2::from_elem((r, c), gout[[0, 0]]));
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = gout[[0, 0]] / lv.len() as f64;
                let mut g = Array2::zeros(lv.raw_dim());
                for ((gi, &z), &t) in g.iter_mut().zip(lv.iter()).zip(targets.iter()) {
                    let sig = 1.0 / (1.0 + (-z).exp());
                    *gi = scale * (sig - t);
                }
                add(work, *logits, g);
            }
            Op::BceProbs { probs, targets } => {
                let pv = self.value(*probs);
                let scale = gout[[0, 0]] / pv.len() as f64;
                let mut g = Array2::zeros(pv.raw_dim());
                for ((gi, &p), &t) in g.iter_mut().zip(pv.iter()).zip(targets.iter()) {
                    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    *gi = scale * (-t / p + (1.0 - t) / (1.0 - p));
                }
                add(work, *probs, g);
            }
            Op::CosineSim(x) => {
                let xv = self.value(*x);
                let sv = self.value(Var(i));
                add(work, *x, cosine_backward(&xv, &sv, &gout.view()));
            }
            Op::Mha { q, k, v, probs, heads } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (r, d) = (qv.nrows(), qv.ncols());
                let groups = probs.len() / heads;
                let n = r / groups;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros((r, d));
                let mut dk = Array2::zeros((r, d));
                let mut dv = Array2::zeros((r, d));
                for (pi, p) in probs.iter().enumerate() {
                    let (gi, h) = (pi / heads, pi % heads);
                    let span =
                        ndarray::s![gi * n..(gi + 1) * n, h * dh..(h + 1) * dh];
                    let gh = gout.slice(span);
                    let vh = vv.slice(span);
                    dv.slice_mut(span).assign(&p.t().dot(&gh));
                    let dprobs = gh.dot(&vh.t());
                    let mut dscores = dprobs;
                    for a in 0..n {
                        let dot = dscores.row(a).dot(&p.row(a));
                        let mut row = dscores.row_mut(a);
                        row -= dot;
                        row *= &p.row(a);
                    }
                    dscores *= scale;
                    let qh = qv.slice(span);
                    let kh = kv.slice(span);
                    dq.slice_mut(span).assign(&dscores.dot(&kh));
                    dk.slice_mut(span).assign(&dscores.t().dot(&qh));
                }
                add(work, *q, dq);
                add(work, *k, dk);
                add(work, *v, dv);
            }
            Op::GroupedMlp { x, weights, group_rows, pre, tanh_u } => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (e, quad) in weights.chunks_exact(4).enumerate() {
                    let [w1, b1, w2, b2] = [quad[0], quad[1], quad[2], quad[3]];
                    let span = ndarray::s![e * group_rows..(e + 1) * group_rows, ..];
                    let rows = xv.slice(span);
                    let (p, t) = (&pre[e], &tanh_u[e]);
                    let mut hidden = p.clone();
                    hidden.zip_mut_with(t, |h, &tv| *h = gelu_from_tanh(*h, tv));
                    let gy = gout.slice(span);
                    let ncols = gy.ncols();
                    add(
                        work,
                        b2,
                        gy.sum_axis(Axis(0)).into_shape_with_order((1, ncols)).unwrap(),
                    );
                    add(work, w2, hidden.t().dot(&gy));
                    let mut dpre = gy.dot(&self.value(w2).t());
                    ndarray::Zip::from(&mut dpre)
                        .and(p)
                        .and(t)
                        .for_each(|g, &pv, &tv| *g *= gelu_grad_from_tanh(pv, tv));
                    let hcols = dpre.ncols();
                    add(
                        work,
                        b1,
                        dpre.sum_axis(Axis(0)).into_shape_with_order((1, hcols)).unwrap(),
                    );
                    add(work, w1, rows.t().dot(&dpre));
                    dx.slice_mut(span).assign(&dpre.dot(&self.value(w1).t()));
                }
                add(work, *x, dx);
            }
            Op::BlockMatmul { a, b, blocks } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ra = av.nrows() / blocks;
                let m = av.ncols();
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for i in 0..*blocks {
                    let aspan = ndarray::s![i * ra..(i + 1) * ra, ..];
                    let bspan = ndarray::s![i * m..(i + 1) * m, ..];
                    let gb = gout.slice(aspan);
                    da.slice_mut(aspan).assign(&gb.dot(&bv.slice(bspan).t()));
                    db.slice_mut(bspan).assign(&av.slice(aspan).t().dot(&gb));
                }
                add(work, *a, da);
                add(work, *b, db);
            }
            Op::BlockMatmulT { a, b, blocks } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let r = av.nrows() / blocks;
                let ca = av.ncols();
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for i in 0..*blocks {
                    let span = ndarray::s![i * r..(i + 1) * r, ..];
                    let gspan = ndarray::s![i * ca..(i + 1) * ca, ..];
                    let gb = gout.slice(gspan);
                    da.slice_mut(span).assign(&bv.slice(span).dot(&gb.t()));
                    db.slice_mut(span).assign(&av.slice(span).dot(&gb));
                }
                add(work, *a, da);
                add(work, *b, db);
            }
            Op::GroupCosinePenalty { x, group_rows, weights, scale } => {
                let xv = self.value(*x);
                let factor = gout[[0, 0]] * scale;
                let gmat = weights.mapv(|w| w * factor);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (bi, block) in xv.axis_chunks_iter(Axis(0), *group_rows).enumerate() {
                    let sim = cosine_matrix(&block);
                    let gb = cosine_backward(&block, &sim.view(), &gmat.view());
                    dx.slice_mut(ndarray::s![bi * group_rows..(bi + 1) * group_rows, ..])
                        .assign(&gb);
                }
                add(work, *x, dx);
            }
        }
    }
}
