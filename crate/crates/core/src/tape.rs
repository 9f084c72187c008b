//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! Every node holds its value eagerly, so control flow that depends on
//! intermediate values (top-k selection, argmax over candidates) can read
//! them while the graph is being built. Vectors are `1 × n` row matrices.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a · s` where `s` is a `1×1` node.
    MulScalar(NodeId, NodeId),
    /// `a / s` where `s` is a `1×1` node.
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    /// Gradient passes only where the input was inside the clamp range.
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    /// Row-wise L1 normalisation; rows flagged `true` were replaced by the
    /// uniform distribution and carry no gradient.
    NormalizeRows(NodeId, Vec<bool>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    /// Column-wise logsumexp over rows: `m×n → 1×n`.
    LogSumExpRows(NodeId),
    /// `m×n → 1×n`
    MeanRows(NodeId),
    /// `m×n → m×1`
    SumCols(NodeId),
    SumAll(NodeId),
    /// Row-wise max, `m×n → m×1`, with the chosen column per row.
    MaxCols(NodeId, Vec<usize>),
    SelectRows(NodeId, Vec<usize>),
    SelectCols(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Place `a` at `(row, col)` inside a zero matrix of the node's shape.
    PadBlock(NodeId, usize, usize),
    /// Multiply row `i` by a constant weight.
    ScaleRows(NodeId, Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A computation graph recorded while evaluating a forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn row_vec(&self, id: NodeId) -> Vec<f64> {
        self.value(id).iter().copied().collect()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// A constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn row(&mut self, values: &[f64]) -> NodeId {
        self.constant(Matrix::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    /// A differentiable leaf that is not backed by a parameter store.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_leaves.get(&id) {
            return node;
        }
        let entry = store.entry(id);
        let node = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.param_leaves.insert(id, node);
        node
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.param_leaves.iter().map(|(&p, &n)| (p, n))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        assert_eq!(self.shape(bias).0, 1, "bias must be a row vector");
        let v = self.value(a) + self.value(bias);
        let ng = self.ng(&[a, bias]);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let v = self.value(a) * self.scalar(s);
        let ng = self.ng(&[a, s]);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let v = self.value(a) / self.scalar(s);
        let ng = self.ng(&[a, s]);
        self.push(v, Op::DivScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let ng = self.ng(&[a]);
        self.push(v, Op::AddConst(a), ng)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).mapv(f);
        let ng = self.ng(&[a]);
        self.push(v, op, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Divides each row by its sum. Rows whose sum falls below `eps` are
    /// replaced by the uniform distribution; their indices are returned.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> (NodeId, Vec<usize>) {
        let mut v = self.value(a).clone();
        let n = v.ncols();
        let mut fallback = vec![false; v.nrows()];
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let sum = row.sum();
            if sum < eps || !sum.is_finite() {
                fallback[i] = true;
                row.fill(1.0 / n as f64);
            } else {
                row.mapv_inplace(|x| x / sum);
            }
        }
        let degenerate = fallback
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect();
        let ng = self.ng(&[a]);
        (self.push(v, Op::NormalizeRows(a, fallback), ng), degenerate)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &normed * self.value(gain) + self.value(bias);
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        )
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros((1, av.ncols()));
        for (j, col) in av.columns().into_iter().enumerate() {
            out[[0, j]] = logsumexp(col.iter().copied());
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let ng = self.ng(&[a]);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(&[a]);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    pub fn max_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros((av.nrows(), 1));
        let mut arg = Vec::with_capacity(av.nrows());
        for (i, row) in av.rows().into_iter().enumerate() {
            let (j, m) = argmax(row.iter().copied());
            out[[i, 0]] = m;
            arg.push(j);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::MaxCols(a, arg), ng)
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(&[a]);
        self.push(v, Op::SelectRows(a, idx.to_vec()), ng)
    }

    pub fn select_cols(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(1), idx);
        let ng = self.ng(&[a]);
        self.push(v, Op::SelectCols(a, idx.to_vec()), ng)
    }

    pub fn element(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let r = self.select_rows(a, &[row]);
        self.select_cols(r, &[col])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = self.ng(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn pad_block(&mut self, a: NodeId, shape: (usize, usize), row: usize, col: usize) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.dim();
        let mut v = Matrix::zeros(shape);
        v.slice_mut(s![row..row + r, col..col + c]).assign(av);
        let ng = self.ng(&[a]);
        self.push(v, Op::PadBlock(a, row, col), ng)
    }

    pub fn scale_rows(&mut self, a: NodeId, weights: &[f64]) -> NodeId {
        let mut v = self.value(a).clone();
        for (mut row, &w) in v.rows_mut().into_iter().zip(weights) {
            row *= w;
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::ScaleRows(a, weights.to_vec()), ng)
    }

    /// Reverse pass from a `1×1` output node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of `output` for every trainable parameter that took part in
    /// the graph.
    pub fn param_grads(&self, output: NodeId) -> Vec<(ParamId, Matrix)> {
        let grads = self.backward(output);
        let mut out: Vec<_> = self
            .param_leaves
            .iter()
            .filter(|(_, n)| self.nodes[n.0].needs_grad)
            .map(|(&p, &n)| {
                let g = grads
                    .get(n)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.value(n).dim()));
                (p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(val(*b)));
                acc(*b, g.t().dot(val(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, g * sv);
                acc(*s, Matrix::from_elem((1, 1), (g * val(*a)).sum()));
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, g / sv);
                let ds = -(g * val(*a)).sum() / (sv * sv);
                acc(*s, Matrix::from_elem((1, 1), ds));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g * &node.value.mapv(|y| 1.0 - y * y)),
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Sqrt(a) => acc(*a, g / &node.value.mapv(|y| 2.0 * y)),
            Op::Sigmoid(a) => acc(*a, g * &node.value.mapv(|y| y * (1.0 - y))),
            Op::Gelu(a) => acc(*a, g * &val(*a).mapv(gelu_grad)),
            Op::Clamp(a, lo, hi) => {
                let mask = val(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                acc(*a, g * &mask)
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let inner = d.sum_axis(Axis(1));
                for (mut row, (yrow, s)) in d.rows_mut().into_iter().zip(y.rows().into_iter().zip(inner.iter())) {
                    row.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * s);
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a, fallback) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    if fallback[i] {
                        continue;
                    }
                    let sum = x.row(i).sum();
                    let gy: f64 = g.row(i).dot(&y.row(i));
                    for j in 0..x.ncols() {
                        d[[i, j]] = (g[[i, j]] - gy) / sum;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gain, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gn = g * val(*gain);
                let n = normed.ncols() as f64;
                let mut dx = Matrix::zeros(normed.dim());
                for i in 0..normed.nrows() {
                    let gr = gn.row(i);
                    let nr = normed.row(i);
                    let mean_g = gr.sum() / n;
                    let mean_gn = gr.dot(&nr) / n;
                    for j in 0..normed.ncols() {
                        dx[[i, j]] = inv_std[i] * (gr[j] - mean_g - nr[j] * mean_gn);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let mut d = Matrix::zeros(x.dim());
                for j in 0..x.ncols() {
                    let lse = node.value[[0, j]];
                    for i in 0..x.nrows() {
                        d[[i, j]] = g[[0, j]] * (x[[i, j]] - lse).exp();
                    }
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let m = val(*a).nrows();
                let row = g / m as f64;
                acc(*a, row.broadcast(val(*a).dim()).unwrap().to_owned());
            }
            Op::SumCols(a) => acc(*a, g.broadcast(val(*a).dim()).unwrap().to_owned()),
            Op::SumAll(a) => acc(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::MaxCols(a, arg) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (i, &j) in arg.iter().enumerate() {
                    d[[i, j]] = g[[i, 0]];
                }
                acc(*a, d);
            }
            Op::SelectRows(a, idx) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(k);
                }
                acc(*a, d);
            }
            Op::SelectCols(a, idx) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (k, &j) in idx.iter().enumerate() {
                    let mut col = d.column_mut(j);
                    col += &g.column(k);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::PadBlock(a, row, col) => {
                let (r, c) = val(*a).dim();
                acc(*a, g.slice(s![*row..*row + r, *col..*col + c]).to_owned());
            }
            Op::ScaleRows(a, w) => {
                let mut d = g.clone();
                for (mut row, &wi) in d.rows_mut().into_iter().zip(w) {
                    row *= wi;
                }
                acc(*a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs.enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.unwrap_or((0, f64::NEG_INFINITY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph, NodeId) -> NodeId, x0: Matrix) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.dim()));
        let h = 1e-6;
        for idx in ndarray::indices(x0.dim()) {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[idx] += delta;
                let mut g = Graph::new();
                let x = g.variable(xp);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "index {idx:?}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn weights(g: &mut Graph, shape: (usize, usize)) -> NodeId {
        let n = shape.0 * shape.1;
        let data = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        g.constant(Matrix::from_shape_vec(shape, data).unwrap())
    }

    fn x23() -> Matrix {
        array![[0.3, -0.7, 1.1], [0.05, 0.4, -0.2]]
    }

    #[test]
    fn matmul_and_transpose_grads() {
        fd_check(
            |g, x| {
                let w = weights(g, (3, 4));
                let y = g.matmul(x, w);
                let w2 = weights(g, (5, 4));
                let z = g.matmul_t(y, w2);
                let t = g.transpose(z);
                let e = g.tanh(t);
                g.sum(e)
            },
            x23(),
        );
    }

    #[test]
    fn softmax_layernorm_gelu_grads() {
        fd_check(
            |g, x| {
                let sm = g.softmax_rows(x);
                let gain = weights(g, (1, 3));
                let bias = weights(g, (1, 3));
                let ln = g.layer_norm(x, gain, bias, 1e-5);
                let ge = g.gelu(ln);
                let w = weights(g, (2, 3));
                let p = g.mul(sm, w);
                let q = g.mul(ge, p);
                g.sum(q)
            },
            x23(),
        );
    }

    #[test]
    fn pooling_and_selection_grads() {
        fd_check(
            |g, x| {
                let l = g.logsumexp_rows(x);
                let m = g.mean_rows(x);
                let c = g.concat_cols(&[l, m]);
                let r = g.select_rows(x, &[1, 0, 1]);
                let k = g.select_cols(r, &[2, 0]);
                let mx = g.max_cols(k);
                let s1 = g.sum(mx);
                let cc = g.concat_rows(&[c, c]);
                let sq = g.mul(cc, cc);
                let s2 = g.sum(sq);
                g.add(s1, s2)
            },
            x23(),
        );
    }

    #[test]
    fn scalar_broadcast_and_normalise_grads() {
        fd_check(
            |g, x| {
                let e = g.exp(x);
                let (n, _) = g.normalize_rows(e, 1e-12);
                let s = g.select_rows(x, &[0]);
                let s = g.select_cols(s, &[1]);
                let sig = g.sigmoid(s);
                let a = g.mul_scalar(n, sig);
                let d = g.div_scalar(a, sig);
                let d2 = g.div_scalar(d, s);
                let sc = g.scale_rows(d2, &[2.0, -1.0]);
                let pad = g.pad_block(sc, (4, 5), 1, 2);
                let w = weights(g, (4, 5));
                let p = g.mul(pad, w);
                let bias = g.select_rows(w, &[0]);
                let p = g.add_row(p, bias);
                let sums = g.sum_cols(p);
                let pos = g_abs_plus(g, sums);
                let sq = g.sqrt(pos);
                let l = g.log(sq);
                g.sum(l)
            },
            x23(),
        );
    }

    fn g_abs_plus(g: &mut Graph, a: NodeId) -> NodeId {
        let sq = g.mul(a, a);
        g.add_const(sq, 1.0)
    }

    #[test]
    fn fallback_rows_are_uniform_without_gradient() {
        let mut g = Graph::new();
        let x = g.variable(array![[0.0, 0.0], [1.0, 3.0]]);
        let (n, degenerate) = g.normalize_rows(x, 1e-12);
        assert_eq!(degenerate, vec![0]);
        assert_eq!(g.value(n).row(0).to_vec(), vec![0.5, 0.5]);
        let w = g.constant(array![[1.0, 2.0], [3.0, 5.0]]);
        let p = g.mul(n, w);
        let s = g.sum(p);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0, 3.0, 3.0].into_iter()), (1, 3.0));
        assert_eq!(argmax([-2.0].into_iter()), (0, -2.0));
    }
}
