//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in
//! topological (creation) order. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into every node that depends on a
//! trainable leaf. Shapes are row-major; most ops treat a tensor as a matrix
//! whose last dimension is the column count.

use super::real::{gemm, Real, View};
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Silu,
    Sigmoid,
    Relu,
    Abs,
    Square,
    Neg,
    Exp,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, weights: Vec<T> },
    SoftCrossEntropy { logits: Var, targets: Vec<T>, probs: Vec<T> },
    StraightThrough { logits: Var, probs: Vec<T> },
    PreferenceCe { diff: Var, dloss: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Unary(..) => "unary",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Reshape(..) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::StraightThrough { .. } => "straight_through",
            Op::PreferenceCe { .. } => "preference_ce",
        }
    }
}

/// Dimensions of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    pub causal: bool,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    label: Option<String>,
}

/// Parameters of a [`ParamSet`] bound as leaves of a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every bound parameter, zero-filled where no gradient
    /// reached the leaf.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); g.value(v).len()],
            })
            .collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    frozen: Frozen<T>,
}

/// Values read through `detached_values` can be recorded on one pass and
/// replayed on later passes, so a finite-difference probe sees stop-gradient
/// quantities as the constants the analytic gradient assumes.
enum Frozen<T> {
    Off,
    Record(Vec<Vec<T>>),
    Replay(Vec<Vec<T>>, usize),
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize]) -> usize {
    let c = cols_of(shape);
    if c == 0 {
        0
    } else {
        shape.iter().product::<usize>() / c
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), frozen: Frozen::Off }
    }

    /// A graph that records every detached value it hands out.
    pub fn recording() -> Self {
        Graph { frozen: Frozen::Record(Vec::new()), ..Self::new() }
    }

    /// A graph whose detached values come from `tape`, in order.
    pub fn replaying(tape: Vec<Vec<T>>) -> Self {
        Graph { frozen: Frozen::Replay(tape, 0), ..Self::new() }
    }

    /// The recorded detached values (empty unless recording).
    pub fn take_tape(&mut self) -> Vec<Vec<T>> {
        match std::mem::replace(&mut self.frozen, Frozen::Off) {
            Frozen::Record(t) => t,
            _ => Vec::new(),
        }
    }

    /// Value of `v` treated as a constant. Use this instead of `value` when
    /// the result feeds back into the graph.
    pub fn detached_values(&mut self, v: Var) -> Vec<T> {
        let own = self.nodes[v.0].value.clone();
        match &mut self.frozen {
            Frozen::Off => own,
            Frozen::Record(tape) => {
                tape.push(own.clone());
                own
            }
            Frozen::Replay(tape, next) => match tape.get(*next) {
                Some(t) if t.len() == own.len() => {
                    *next += 1;
                    t.clone()
                }
                _ => own,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad, label: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[batch, heads, q_len, k_len]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], AttnDims)> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, dims, .. } => Some((weights, *dims)),
            _ => None,
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("constant shape {shape:?} vs {} elements", data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Binds every parameter of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = self.leaf(t, true);
                self.nodes[v.0].label = Some(name.to_string());
                v
            })
            .collect();
        Bound { vars }
    }

    /// Binds parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&mut self, params: &ParamSet<T>) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = self.leaf(t, false);
                self.nodes[v.0].label = Some(name.to_string());
                v
            })
            .collect();
        Bound { vars }
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.detached_values(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return shape_err(format!("matmul rhs must be 2-D, got {sb:?}"));
        }
        let (m, k) = (rows_of(&sa), cols_of(&sa));
        let n = sb[1];
        if k != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), View::dense(m, k), self.value(b), View::dense(k, n), T::zero(), &mut out, View::dense(m, n));
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    fn binary_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Adds a row vector `b` (length = last dim of `x`) to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = cols_of(self.shape(x));
        if self.value(b).len() != cols {
            return shape_err(format!("add_row: {:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).to_vec();
        let bv = self.value(b);
        for row in out.chunks_mut(cols.max(1)) {
            add_into(row, bv);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f = |v: T| -> T {
            match kind {
                Unary::Tanh => v.tanh(),
                Unary::Silu => v * sigmoid(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(T::zero()),
                Unary::Abs => v.abs(),
                Unary::Square => v * v,
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
            }
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Unary(x, kind), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    // ---- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: T = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s / T::of(n as f64)], Op::Mean(x), ng)
    }

    /// Sums over the last dimension.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = cols_of(&shape).max(1);
        let out: Vec<T> = self.value(x).chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let mut new_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(x);
        self.push(new_shape, out, Op::SumLast(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        if start > end || end > rows {
            return shape_err(format!("slice_rows {start}..{end} of {rows} rows"));
        }
        let value = self.value(x)[start * cols..end * cols].to_vec();
        let ng = self.ng(x);
        Ok(self.push(vec![end - start, cols], value, Op::SliceRows { x, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather_rows index {bad} out of {rows} rows"));
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![idx.len(), cols], value, Op::GatherRows { x, idx }, ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let cols = cols_of(&sa);
        if cols != cols_of(&sb) {
            return shape_err(format!("concat_rows {sa:?} and {sb:?}"));
        }
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let rows = rows_of(&sa) + rows_of(&sb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows(a, b), ng))
    }

    // ---- fused layers ----------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = cols_of(&shape);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return shape_err("layer_norm affine parameters do not match width");
        }
        let (gv, bv) = (self.value(gamma).to_vec(), self.value(beta).to_vec());
        let n = T::of(cols as f64);
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` holds `batch * q_len` rows, `k` and `v` hold `batch * k_len` rows.
    /// Head `h` uses the `h`-th contiguous column block of each projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (qk_dim, v_dim) = (cols_of(&sq), cols_of(&sv));
        if cols_of(&sk) != qk_dim {
            return shape_err(format!("attention query width {qk_dim} vs key width {}", cols_of(&sk)));
        }
        if heads == 0 || qk_dim % heads != 0 || v_dim % heads != 0 {
            return shape_err(format!("widths {qk_dim}/{v_dim} not divisible by {heads} heads"));
        }
        if batch == 0 || rows_of(&sq) % batch != 0 || rows_of(&sk) % batch != 0 {
            return shape_err("attention rows not divisible by batch");
        }
        let (q_len, k_len) = (rows_of(&sq) / batch, rows_of(&sk) / batch);
        if rows_of(&sv) != rows_of(&sk) {
            return shape_err("attention keys and values differ in length");
        }
        if causal && q_len != k_len {
            return shape_err("causal attention needs equal query and key lengths");
        }
        let dims = AttnDims { batch, q_len, k_len, heads, qk_dim, v_dim, causal };
        let dh = qk_dim / heads;
        let dvh = v_dim / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut weights = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); batch * q_len * v_dim];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let wo = ((b * heads) + h) * q_len * k_len;
                let w = &mut weights[wo..wo + q_len * k_len];
                let qview = View { offset: b * q_len * qk_dim + h * dh, rows: q_len, cols: dh, row_stride: qk_dim, col_stride: 1 };
                let kview = View { offset: b * k_len * qk_dim + h * dh, rows: k_len, cols: dh, row_stride: qk_dim, col_stride: 1 };
                gemm(qv, qview, kv, kview.t(), T::zero(), w, View::dense(q_len, k_len));
                for i in 0..q_len {
                    let row = &mut w[i * k_len..(i + 1) * k_len];
                    let visible = if causal { i + 1 } else { k_len };
                    let mut mx = T::neg_infinity();
                    for s in row[..visible].iter_mut() {
                        *s = *s * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = T::zero();
                    for s in row[..visible].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in row[..visible].iter_mut() {
                        *s = *s / z;
                    }
                    for s in row[visible..].iter_mut() {
                        *s = T::zero();
                    }
                }
                let vview = View { offset: b * k_len * v_dim + h * dvh, rows: k_len, cols: dvh, row_stride: v_dim, col_stride: 1 };
                let oview = View { offset: b * q_len * v_dim + h * dvh, rows: q_len, cols: dvh, row_stride: v_dim, col_stride: 1 };
                gemm(w, View::dense(q_len, k_len), vv, vview, T::zero(), &mut out, oview);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(vec![batch * q_len, v_dim], out, Op::Attention { q, k, v, dims, weights }, ng))
    }

    /// Per-row cross-entropy `-sum_v t_v log softmax(z)_v` against constant
    /// (possibly soft) targets. Returns one loss per row.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if targets.len() != self.value(logits).len() {
            return shape_err("soft_cross_entropy targets do not match logits");
        }
        let classes = cols_of(&shape);
        let mut probs = Vec::with_capacity(targets.len());
        let mut out = Vec::new();
        for (row, t) in self.value(logits).chunks(classes).zip(targets.chunks(classes)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            let mut loss = T::zero();
            for (&v, &tv) in row.iter().zip(t) {
                probs.push((v - mx).exp() / z);
                loss += tv * (lse - v);
            }
            out.push(loss);
        }
        let rows = out.len();
        let ng = self.ng(logits);
        Ok(self.push(vec![rows], out, Op::SoftCrossEntropy { logits, targets, probs }, ng))
    }

    /// One-hot rows selected by `idx` in the forward pass; gradients flow as
    /// if the output were `softmax(logits)` (straight-through estimator).
    pub fn straight_through(&mut self, logits: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = cols_of(&shape);
        if idx.len() != rows_of(&shape) || idx.iter().any(|&i| i >= classes) {
            return shape_err("straight_through indices do not match logits");
        }
        let mut probs = Vec::with_capacity(self.value(logits).len());
        for row in self.value(logits).chunks(classes) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let mut out = vec![T::zero(); probs.len()];
        for (r, &i) in idx.iter().enumerate() {
            out[r * classes + i] = T::one();
        }
        let ng = self.ng(logits);
        Ok(self.push(shape, out, Op::StraightThrough { logits, probs }, ng))
    }

    /// Bradley-Terry cross-entropy on return differences `diff = G_a - G_b`
    /// with soft labels `(y_a, y_b)`; probabilities are clamped to
    /// `[clamp, 1 - clamp]` before the log. Returns one loss per pair.
    pub fn preference_ce(&mut self, diff: Var, labels: &[(T, T)], clamp: f64) -> Result<Var> {
        if labels.len() != self.value(diff).len() {
            return shape_err("preference_ce labels do not match differences");
        }
        let lo = T::of(clamp.ln());
        let hi = T::of((-clamp).ln_1p());
        let mut out = Vec::with_capacity(labels.len());
        let mut dloss = Vec::with_capacity(labels.len());
        for (&d, &(ya, yb)) in self.value(diff).iter().zip(labels) {
            let log_pa = -softplus(-d);
            let log_pb = -softplus(d);
            let (la, a_free) = clamp_log(log_pa, lo, hi);
            let (lb, b_free) = clamp_log(log_pb, lo, hi);
            out.push(-(ya * la + yb * lb));
            let mut g = T::zero();
            if a_free {
                g -= ya * sigmoid(-d);
            }
            if b_free {
                g += yb * sigmoid(d);
            }
            dloss.push(g);
        }
        let n = out.len();
        let ng = self.ng(diff);
        Ok(self.push(vec![n], out, Op::PreferenceCe { diff, dloss }, ng))
    }

    // ---- diagnostics ------------------------------------------------------

    /// Describes the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(match &n.label {
                Some(l) => format!("parameter {l}"),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        if !self.value(loss)[0].is_finite() {
            let location = self.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::Numerical { location });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => add_into(g, contrib),
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, gout: &[T]) {
        let node = &self.nodes[i];
        // Each arm computes input contributions into owned buffers first, so
        // that the borrow of `node` ends before accumulation.
        let contribs: Vec<(Var, Vec<T>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (rows_of(sa), cols_of(sa), sb[1]);
                let mut out = Vec::new();
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(gout, View::dense(m, n), self.value(*b), View::dense(k, n).t(), T::zero(), &mut da, View::dense(m, k));
                    out.push((*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(self.value(*a), View::dense(m, k).t(), gout, View::dense(m, n), T::zero(), &mut db, View::dense(k, n));
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, gout.iter().zip(vb).map(|(&g, &y)| g * y).collect()),
                    (*b, gout.iter().zip(va).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::AddRow(x, b) => {
                let cols = self.value(*b).len();
                let mut db = vec![T::zero(); cols];
                for row in gout.chunks(cols.max(1)) {
                    add_into(&mut db, row);
                }
                vec![(*x, gout.to_vec()), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, gout.iter().map(|&g| g * *c).collect())],
            Op::Unary(x, kind) => {
                let (xv, yv) = (self.value(*x), &node.value);
                let d: Vec<T> = gout
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&xi, &yi))| {
                        g * match kind {
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s + xi * s * (T::one() - s)
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => T::of(2.0) * xi,
                            Unary::Neg => -T::one(),
                            Unary::Exp => yi,
                        }
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                vec![(*x, vec![gout[0] / T::of(n as f64); n])]
            }
            Op::SumLast(x) => {
                let cols = cols_of(self.shape(*x)).max(1);
                let d = gout.iter().flat_map(|&g| std::iter::repeat(g).take(cols)).collect();
                vec![(*x, d)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::SliceRows { x, start } => {
                let cols = cols_of(self.shape(*x));
                let mut d = vec![T::zero(); self.value(*x).len()];
                d[start * cols..start * cols + gout.len()].copy_from_slice(gout);
                vec![(*x, d)]
            }
            Op::GatherRows { x, idx } => {
                let cols = cols_of(self.shape(*x));
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * cols..(src + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                }
                vec![(*x, d)]
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                vec![(*a, gout[..na].to_vec()), (*b, gout[na..].to_vec())]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = self.value(*gamma).len();
                let gv = self.value(*gamma);
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); gout.len()];
                let mut dg = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                for (r, (grow, hrow)) in gout.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..cols {
                        let dh = grow[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                        dg[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..cols {
                        let dh = grow[j] * gv[j];
                        dx[r * cols + j] = inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::Attention { q, k, v, dims, weights } => {
                let AttnDims { batch, q_len, k_len, heads, qk_dim, v_dim, .. } = *dims;
                let dh = qk_dim / heads;
                let dvh = v_dim / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dw = vec![T::zero(); q_len * k_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let wo = ((b * heads) + h) * q_len * k_len;
                        let w = &weights[wo..wo + q_len * k_len];
                        let qview = View { offset: b * q_len * qk_dim + h * dh, rows: q_len, cols: dh, row_stride: qk_dim, col_stride: 1 };
                        let kview = View { offset: b * k_len * qk_dim + h * dh, rows: k_len, cols: dh, row_stride: qk_dim, col_stride: 1 };
                        let vview = View { offset: b * k_len * v_dim + h * dvh, rows: k_len, cols: dvh, row_stride: v_dim, col_stride: 1 };
                        let oview = View { offset: b * q_len * v_dim + h * dvh, rows: q_len, cols: dvh, row_stride: v_dim, col_stride: 1 };
                        // dW = dO V^T
                        gemm(gout, oview, vv, vview.t(), T::zero(), &mut dw, View::dense(q_len, k_len));
                        // dV += W^T dO
                        gemm(w, View::dense(q_len, k_len).t(), gout, oview, T::one(), &mut dv, vview);
                        // dS = W * (dW - rowsum(dW * W)), then fold in the scale.
                        for i in 0..q_len {
                            let wr = &w[i * k_len..(i + 1) * k_len];
                            let dr = &mut dw[i * k_len..(i + 1) * k_len];
                            let dot: T = wr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &wi) in dr.iter_mut().zip(wr) {
                                *d = wi * (*d - dot) * scale;
                            }
                        }
                        gemm(&dw, View::dense(q_len, k_len), kv, kview, T::one(), &mut dq, qview);
                        gemm(&dw, View::dense(q_len, k_len).t(), qv, qview, T::one(), &mut dk, kview);
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let classes = cols_of(self.shape(*logits));
                let mut d = vec![T::zero(); probs.len()];
                for (r, &g) in gout.iter().enumerate() {
                    let t = &targets[r * classes..(r + 1) * classes];
                    let total: T = t.iter().copied().sum();
                    for c in 0..classes {
                        d[r * classes + c] = g * (total * probs[r * classes + c] - t[c]);
                    }
                }
                vec![(*logits, d)]
            }
            Op::StraightThrough { logits, probs } => {
                let classes = cols_of(self.shape(*logits));
                let mut d = vec![T::zero(); probs.len()];
                for ((drow, prow), grow) in d.chunks_mut(classes).zip(probs.chunks(classes)).zip(gout.chunks(classes)) {
                    let dot: T = prow.iter().zip(grow).map(|(&p, &g)| p * g).sum();
                    for c in 0..classes {
                        drow[c] = prow[c] * (grow[c] - dot);
                    }
                }
                vec![(*logits, d)]
            }
            Op::PreferenceCe { diff, dloss } => {
                vec![(*diff, gout.iter().zip(dloss).map(|(&g, &d)| g * d).collect())]
            }
        };
        for (v, c) in contribs {
            self.acc(v, &c);
        }
    }
}

fn clamp_log<T: Real>(l: T, lo: T, hi: T) -> (T, bool) {
    if l < lo {
        (lo, false)
    } else if l > hi {
        (hi, false)
    } else {
        (l, true)
    }
}
