//! Dense matrices, reverse-mode autodiff, and AdamW.
//!
//! The tape records every forward operation into a flat node list; gradients
//! come from one reverse sweep. Everything is 64-bit: the networks here are
//! tiny and determinism plus finite-difference fidelity matter more than
//! speed. Tree-shaped ops (child means, path means, subtree sums) are first
//! class so a whole branch-and-bound tree evaluates as one batched graph.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const LAYERNORM_EPS: f64 = 1e-5;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() needs a 1x1 matrix");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// C = A * B.
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    let orow = i * out.cols;
                    let brow = k * b.cols;
                    for j in 0..b.cols {
                        out.data[orow + j] += a * b.data[brow + j];
                    }
                }
            }
        }
        out
    }

    /// C = A^T * B.
    pub fn matmul_at_b(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.rows, b.rows);
        let mut out = Matrix::zeros(self.cols, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    let orow = k * out.cols;
                    let brow = i * b.cols;
                    for j in 0..b.cols {
                        out.data[orow + j] += a * b.data[brow + j];
                    }
                }
            }
        }
        out
    }

    /// C = A * B^T.
    pub fn matmul_a_bt(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.cols);
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for k in 0..b.rows {
                let mut acc = 0.0;
                let arow = i * self.cols;
                let brow = k * b.cols;
                for j in 0..self.cols {
                    acc += self.data[arow + j] * b.data[brow + j];
                }
                out.data[i * out.cols + k] = acc;
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter: {0}")]
    UnknownParameter(String),
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (off for biases and gains).
    pub decay: bool,
}

/// Named dense arrays with fixed shapes. Iteration order is the sorted name
/// order, which keeps every downstream loop deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix, trainable: bool, decay: bool) {
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                decay,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }
}

/// Tree wiring shared by the structured ops. Node ids must be in creation
/// order (every parent id below its children's).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TreeIndex {
    pub parent: Vec<Option<usize>>,
    pub left: Vec<Option<usize>>,
    pub right: Vec<Option<usize>>,
    pub depth: Vec<usize>,
}

impl TreeIndex {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

pub type ValueId = usize;

enum Op {
    Input,
    Param(String),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    MulElem(ValueId, ValueId),
    Scale(ValueId, f64),
    /// Broadcast multiply by a 1x1 tape value.
    ScaleBy(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    /// X (n x d) plus a (1 x d) row broadcast over every row.
    AddRow(ValueId, ValueId),
    LeakyRelu(ValueId, f64),
    LayerNormRows(ValueId),
    LogSoftmax(ValueId),
    Exp(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    Max(ValueId),
    Pick(ValueId, usize, usize),
    Clamp(ValueId, f64, f64),
    Min2(ValueId, ValueId),
    StopGrad(#[allow(dead_code)] ValueId),
    GatherRows(ValueId, Rc<Vec<usize>>),
    /// Mean of the two child rows per node; a missing child contributes the
    /// zero vector, and the divisor is always two.
    ChildMean(ValueId, Rc<TreeIndex>),
    /// Mean of a per-node column along each node's root path.
    PathMean(ValueId, Rc<TreeIndex>),
    /// Subtree sum of a per-node column divided by the path length.
    SubtreeMean(ValueId, Rc<TreeIndex>),
}

struct TapeNode {
    op: Op,
    value: Matrix,
}

/// Records a forward computation for exact reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn get_or_zero(&self, name: &str, rows: usize, cols: usize) -> Matrix {
        self.grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> ValueId {
        self.nodes.push(TapeNode { op, value });
        self.nodes.len() - 1
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Input, value)
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.input(Matrix::scalar(v))
    }

    /// Trainable leaf registered under the parameter's name.
    pub fn param(&mut self, name: &str, params: &ParameterSet) -> ValueId {
        let value = params.get(name).clone();
        self.push(Op::Param(name.to_string()), value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert!(self.nodes[a].value.same_shape(&self.nodes[b].value));
        let value = zip(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert!(self.nodes[a].value.same_shape(&self.nodes[b].value));
        let value = zip(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert!(self.nodes[a].value.same_shape(&self.nodes[b].value));
        let value = zip(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        self.push(Op::MulElem(a, b), value)
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let value = map(&self.nodes[a].value, |x| k * x);
        self.push(Op::Scale(a, k), value)
    }

    /// `x` times a scalar held on the tape (1x1), broadcast elementwise.
    pub fn scale_by(&mut self, x: ValueId, s: ValueId) -> ValueId {
        let k = self.nodes[s].value.item();
        let value = map(&self.nodes[x].value, |v| k * v);
        self.push(Op::ScaleBy(x, s), value)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), value)
    }

    /// `x + bias` where bias is a single row broadcast over all rows of x.
    pub fn add_row(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let (xm, bm) = (&self.nodes[x].value, &self.nodes[bias].value);
        assert_eq!(bm.rows, 1);
        assert_eq!(bm.cols, xm.cols);
        let mut value = xm.clone();
        for i in 0..value.rows {
            for j in 0..value.cols {
                value.data[i * value.cols + j] += bm.data[j];
            }
        }
        self.push(Op::AddRow(x, bias), value)
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f64) -> ValueId {
        let value = map(&self.nodes[x].value, |v| if v >= 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(x, slope), value)
    }

    /// Per-row layer normalization without trainable parameters
    /// (population variance, epsilon inside the square root).
    pub fn layernorm_rows(&mut self, x: ValueId) -> ValueId {
        let xm = &self.nodes[x].value;
        let mut value = xm.clone();
        for i in 0..xm.rows {
            let row = &xm.data[i * xm.cols..(i + 1) * xm.cols];
            let mean = row.iter().sum::<f64>() / xm.cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xm.cols as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for j in 0..xm.cols {
                value.data[i * xm.cols + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(x), value)
    }

    /// Log-softmax over every entry of the matrix (shift-invariant, computed
    /// with max subtraction).
    pub fn log_softmax(&mut self, x: ValueId) -> ValueId {
        let xm = &self.nodes[x].value;
        let max = xm.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = xm.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let value = map(xm, |v| v - log_z);
        self.push(Op::LogSoftmax(x), value)
    }

    /// Softmax over every entry, built from log-softmax for stability.
    pub fn softmax(&mut self, x: ValueId) -> ValueId {
        let ls = self.log_softmax(x);
        self.exp(ls)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let value = map(&self.nodes[x].value, f64::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s = self.nodes[x].value.data.iter().sum::<f64>();
        self.push(Op::Sum(x), Matrix::scalar(s))
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let m = &self.nodes[x].value;
        let s = m.data.iter().sum::<f64>() / m.data.len() as f64;
        self.push(Op::Mean(x), Matrix::scalar(s))
    }

    /// Maximum entry; the subgradient goes to the first maximizer.
    pub fn max(&mut self, x: ValueId) -> ValueId {
        let m = self
            .nodes[x]
            .value
            .data
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.push(Op::Max(x), Matrix::scalar(m))
    }

    pub fn pick(&mut self, x: ValueId, row: usize, col: usize) -> ValueId {
        let v = self.nodes[x].value.get(row, col);
        self.push(Op::Pick(x, row, col), Matrix::scalar(v))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> ValueId {
        let value = map(&self.nodes[x].value, |v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), value)
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min2(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert!(self.nodes[a].value.same_shape(&self.nodes[b].value));
        let value = zip(&self.nodes[a].value, &self.nodes[b].value, f64::min);
        self.push(Op::Min2(a, b), value)
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: ValueId) -> ValueId {
        let value = self.nodes[x].value.clone();
        // The input id is kept for graph inspection even though the reverse
        // sweep never visits it.
        self.push(Op::StopGrad(x), value)
    }

    pub fn gather_rows(&mut self, x: ValueId, rows: Rc<Vec<usize>>) -> ValueId {
        let xm = &self.nodes[x].value;
        let mut value = Matrix::zeros(rows.len(), xm.cols);
        for (out_i, &src) in rows.iter().enumerate() {
            for j in 0..xm.cols {
                value.data[out_i * xm.cols + j] = xm.get(src, j);
            }
        }
        self.push(Op::GatherRows(x, rows), value)
    }

    /// Per node: mean of its two children's rows, missing children counting
    /// as zero rows.
    pub fn child_mean(&mut self, h: ValueId, tree: Rc<TreeIndex>) -> ValueId {
        let hm = &self.nodes[h].value;
        assert_eq!(hm.rows, tree.len());
        let mut value = Matrix::zeros(hm.rows, hm.cols);
        for n in 0..tree.len() {
            for (child, _) in [(tree.left[n], 0), (tree.right[n], 1)] {
                if let Some(c) = child {
                    for j in 0..hm.cols {
                        value.data[n * hm.cols + j] += 0.5 * hm.get(c, j);
                    }
                }
            }
        }
        self.push(Op::ChildMean(h, tree), value)
    }

    /// Per node `n`: mean of `w` over the root-to-`n` path (length depth+1).
    pub fn path_mean(&mut self, w: ValueId, tree: Rc<TreeIndex>) -> ValueId {
        let wm = &self.nodes[w].value;
        assert_eq!(wm.cols, 1);
        assert_eq!(wm.rows, tree.len());
        let mut sums = vec![0.0; tree.len()];
        for n in 0..tree.len() {
            sums[n] = wm.data[n] + tree.parent[n].map_or(0.0, |p| sums[p]);
        }
        let value = Matrix::from_vec(
            tree.len(),
            1,
            sums.iter()
                .enumerate()
                .map(|(n, s)| s / (tree.depth[n] + 1) as f64)
                .collect(),
        );
        self.push(Op::PathMean(w, tree), value)
    }

    /// Per node `n`: sum of `w` over the subtree rooted at `n`, divided by
    /// the root-path length of `n` (the bottom-up aggregation variant).
    pub fn subtree_mean(&mut self, w: ValueId, tree: Rc<TreeIndex>) -> ValueId {
        let wm = &self.nodes[w].value;
        assert_eq!(wm.cols, 1);
        assert_eq!(wm.rows, tree.len());
        let mut sums = wm.data.clone();
        for n in (0..tree.len()).rev() {
            if let Some(p) = tree.parent[n] {
                sums[p] += sums[n];
            }
        }
        let value = Matrix::from_vec(
            tree.len(),
            1,
            sums.iter()
                .enumerate()
                .map(|(n, s)| s / (tree.depth[n] + 1) as f64)
                .collect(),
        );
        self.push(Op::SubtreeMean(w, tree), value)
    }

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients.
    pub fn backward(&self, loss: ValueId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.data.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(name) => {
                    match out.grads.get_mut(name.as_str()) {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        }
                        None => {
                            out.grads.insert(name.clone(), g);
                        }
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg = map(&g, |v| -v);
                    accumulate(&mut grads, *b, &neg);
                }
                Op::MulElem(a, b) => {
                    let ga = zip(&g, &self.nodes[*b].value, |x, y| x * y);
                    let gb = zip(&g, &self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, k) => {
                    let ga = map(&g, |v| k * v);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.nodes[*s].value.item();
                    let gx = map(&g, |v| k * v);
                    accumulate(&mut grads, *x, &gx);
                    let gs: f64 = g
                        .data
                        .iter()
                        .zip(&self.nodes[*x].value.data)
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    accumulate(&mut grads, *s, &Matrix::scalar(gs));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_a_bt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_at_b(&g);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, *x, &g);
                    let mut gb = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gb.data[j] += g.data[i * g.cols + j];
                        }
                    }
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::LeakyRelu(x, slope) => {
                    let gx = zip(&g, &self.nodes[*x].value, |gv, xv| {
                        if xv >= 0.0 {
                            gv
                        } else {
                            slope * gv
                        }
                    });
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LayerNormRows(x) => {
                    let xm = &self.nodes[*x].value;
                    let y = &self.nodes[id].value;
                    let mut gx = Matrix::zeros(xm.rows, xm.cols);
                    let d = xm.cols as f64;
                    for i in 0..xm.rows {
                        let row = &xm.data[i * xm.cols..(i + 1) * xm.cols];
                        let mean = row.iter().sum::<f64>() / d;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
                        let yrow = &y.data[i * y.cols..(i + 1) * y.cols];
                        let g_mean = grow.iter().sum::<f64>() / d;
                        let gy_mean =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..xm.cols {
                            gx.data[i * xm.cols + j] =
                                inv * (grow[j] - g_mean - yrow[j] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LogSoftmax(x) => {
                    // d/dx log_softmax = g - softmax * sum(g)
                    let y = &self.nodes[id].value;
                    let g_sum: f64 = g.data.iter().sum();
                    let gx = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(gv, yv)| gv - yv.exp() * g_sum)
                            .collect(),
                    };
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Exp(x) => {
                    let gx = zip(&g, &self.nodes[id].value, |gv, yv| gv * yv);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let src = &self.nodes[*x].value;
                    let gx = map(src, |_| gv);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Mean(x) => {
                    let src = &self.nodes[*x].value;
                    let gv = g.item() / src.data.len() as f64;
                    let gx = map(src, |_| gv);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Max(x) => {
                    let src = &self.nodes[*x].value;
                    let best = self.nodes[id].value.item();
                    let idx = src.data.iter().position(|&v| v == best).unwrap();
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    gx.data[idx] = g.item();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Pick(x, row, col) => {
                    let src = &self.nodes[*x].value;
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    gx.data[row * src.cols + col] = g.item();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let gx = zip(&g, &self.nodes[*x].value, |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Min2(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(av.data.iter().zip(&bv.data))
                            .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                            .collect(),
                    };
                    let gb = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(av.data.iter().zip(&bv.data))
                            .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                            .collect(),
                    };
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::StopGrad(_) => {}
                Op::GatherRows(x, rows) => {
                    let src = &self.nodes[*x].value;
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    for (out_i, &srow) in rows.iter().enumerate() {
                        for j in 0..src.cols {
                            gx.data[srow * src.cols + j] += g.data[out_i * g.cols + j];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::ChildMean(h, tree) => {
                    let src = &self.nodes[*h].value;
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    for n in 0..tree.len() {
                        for child in [tree.left[n], tree.right[n]].into_iter().flatten() {
                            for j in 0..src.cols {
                                gx.data[child * src.cols + j] += 0.5 * g.data[n * g.cols + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *h, &gx);
                }
                Op::PathMean(w, tree) => {
                    // grad_w[u] = sum over descendants n of u (inclusive) of
                    // g[n] / (depth[n] + 1); push accumulators up the tree.
                    let mut acc: Vec<f64> = (0..tree.len())
                        .map(|n| g.data[n] / (tree.depth[n] + 1) as f64)
                        .collect();
                    for n in (0..tree.len()).rev() {
                        if let Some(p) = tree.parent[n] {
                            let v = acc[n];
                            acc[p] += v;
                        }
                    }
                    let gx = Matrix::from_vec(tree.len(), 1, acc);
                    accumulate(&mut grads, *w, &gx);
                }
                Op::SubtreeMean(w, tree) => {
                    // grad_w[u] = sum over ancestors n of u (inclusive) of
                    // g[n] / (depth[n] + 1); push accumulators down the tree.
                    let mut acc: Vec<f64> = (0..tree.len())
                        .map(|n| g.data[n] / (tree.depth[n] + 1) as f64)
                        .collect();
                    for n in 0..tree.len() {
                        if let Some(p) = tree.parent[n] {
                            acc[n] += acc[p];
                        }
                    }
                    let gx = Matrix::from_vec(tree.len(), 1, acc);
                    accumulate(&mut grads, *w, &gx);
                }
            }
        }
        out
    }
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: ValueId, g: &Matrix) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot => *slot = Some(g.clone()),
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

/// One decoupled-weight-decay Adam step over every trainable parameter.
/// Decay is skipped for arrays flagged `decay = false`.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        if !param.trainable {
            continue;
        }
        let (rows, cols) = (param.value.rows, param.value.cols);
        let g = grads.get_or_zero(name, rows, cols);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        for i in 0..param.value.data.len() {
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            let mut p = param.value.data[i];
            p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if param.decay {
                p -= cfg.lr * cfg.weight_decay * param.value.data[i];
            }
            param.value.data[i] = p;
        }
    }
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per trainable parameter array.
    pub per_param: BTreeMap<String, f64>,
    /// (name, error) of the single worst entry across all arrays.
    pub worst: Option<(String, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks analytic gradients of `build` against central finite differences.
///
/// `build` must reconstruct the same forward computation for any parameter
/// values; it is re-run twice per parameter entry with a `step`-sized
/// perturbation. Relative error uses `max(|analytic|, |numeric|, 1e-6)` as
/// the denominator so detached (both-zero) paths compare exactly.
pub fn grad_check<F>(
    mut build: F,
    params: &mut ParameterSet,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&ParameterSet) -> (Tape, ValueId),
{
    let (tape, loss) = build(params);
    let analytic = tape.backward(loss);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut per_param = BTreeMap::new();
    let mut worst: Option<(String, f64)> = None;
    for name in names {
        let len = params.get(&name).data.len();
        let (rows, cols) = {
            let m = params.get(&name);
            (m.rows, m.cols)
        };
        let a = analytic.get_or_zero(&name, rows, cols);
        let mut max_err = 0.0f64;
        for i in 0..len {
            let orig = params.get(&name).data[i];
            params.get_mut(&name).data[i] = orig + step;
            let (tp, lp) = build(params);
            let f_plus = tp.value(lp).item();
            params.get_mut(&name).data[i] = orig - step;
            let (tm, lm) = build(params);
            let f_minus = tm.value(lm).item();
            params.get_mut(&name).data[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = (a.data[i] - numeric).abs()
                / a.data[i].abs().max(numeric.abs()).max(1e-6);
            if err > max_err {
                max_err = err;
            }
        }
        if worst.as_ref().map(|(_, w)| max_err > *w).unwrap_or(true) {
            worst = Some((name.clone(), max_err));
        }
        per_param.insert(name, max_err);
    }
    let pass = worst.as_ref().map(|(_, w)| *w < tolerance).unwrap_or(true);
    GradCheckReport {
        per_param,
        worst,
        tolerance,
        pass,
    }
}
