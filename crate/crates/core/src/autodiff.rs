//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its value and
//! the operands it was computed from. [`Graph::backward`] walks the tape in
//! reverse and accumulates `d root / d value` into each node's gradient.
//! Graphs are rebuilt for every step and are confined to one thread.
//!
//! Conventions:
//! * `relu` has subgradient 0 at 0.
//! * `log` floors its input at [`LOG_FLOOR`]; below the floor the gradient is 0.
//! * `l2_normalize_rows` floors the row norm at [`NORM_FLOOR`].

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::tensor::Matrix;

pub const LOG_FLOOR: f64 = 1e-12;
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{op}: index ({row}, {col}) out of range for shape {shape:?}")]
    IndexOutOfRange { op: &'static str, row: usize, col: usize, shape: (usize, usize) },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("flat vector has length {got}, store expects {expected}")]
    FlatLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    AddScalar(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    L2NormalizeRows(NodeId),
    Dot(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    Transpose(NodeId),
    Gather(NodeId, Vec<(usize, usize)>),
    LogSumExpRows(NodeId, Option<Vec<bool>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    /// False for constants and for nodes computed only from constants.
    needs_grad: bool,
}

/// A differentiable computation recorded as a tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    /// When set, parameters outside this list load as constants.
    trainable: Option<Vec<String>>,
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

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddScalar(a, b)
            | Op::MulScalar(a, b)
            | Op::DivScalar(a, b)
            | Op::Dot(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumRows(x)
            | Op::L2NormalizeRows(x)
            | Op::Transpose(x)
            | Op::Gather(x, _)
            | Op::LogSumExpRows(x, _) => self.needs(*x),
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.needs(p)),
        };
        let (r, c) = value.shape();
        self.nodes.push(Node { value, grad: Matrix::zeros(r, c), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_slice()[0]
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// A constant or input leaf. Gradients still accumulate on it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient; backward passes stop here.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].needs_grad = false;
        id
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Matrix::scalar(value))
    }

    /// Loads a named parameter from `store` as a leaf. Loading the same name
    /// twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let frozen = self.trainable.as_ref().is_some_and(|t| !t.iter().any(|n| n == name));
        let id = if frozen { self.constant(value.clone()) } else { self.leaf(value.clone()) };
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// A graph on which only the named parameters receive gradients; the
    /// rest load as constants, which shortens backward passes.
    pub fn with_trainable(names: &[String]) -> Self {
        Self { trainable: Some(names.to_vec()), ..Self::default() }
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn require_scalar(&self, op: &'static str, x: NodeId, s: NodeId) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(AutodiffError::ShapeMismatch { op, lhs: self.shape(x), rhs: self.shape(s) });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix (bias add).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", lhs: sx, rhs: sr });
        }
        let mut v = self.value(x).clone();
        let bias = self.value(row).as_slice().to_vec();
        for r in 0..sx.0 {
            for (o, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|a| a * factor);
        self.push(v, Op::Scale(x, factor))
    }

    /// Adds a constant to every entry. The constant receives no gradient.
    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddConst(x))
    }

    /// `x + s` for a `1 x 1` node `s` added to every entry, differentiable in both.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar("add_scalar", x, s)?;
        let f = self.scalar_value(s);
        let v = self.value(x).map(|a| a + f);
        Ok(self.push(v, Op::AddScalar(x, s)))
    }

    /// `x * s` for a `1 x 1` node `s`, differentiable in both.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar("mul_scalar", x, s)?;
        let f = self.scalar_value(s);
        let v = self.value(x).map(|a| a * f);
        Ok(self.push(v, Op::MulScalar(x, s)))
    }

    /// `x / s` for a `1 x 1` node `s`, differentiable in both.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar("div_scalar", x, s)?;
        let f = self.scalar_value(s);
        if f == 0.0 {
            return Err(AutodiffError::Invalid { op: "div_scalar", msg: "division by zero".into() });
        }
        let v = self.value(x).map(|a| a / f);
        Ok(self.push(v, Op::DivScalar(x, s)))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(LOG_FLOOR).ln());
        self.push(v, Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::Invalid { op: "mean", msg: "empty input".into() });
        }
        let v = Matrix::scalar(self.value(x).sum() / n as f64);
        Ok(self.push(v, Op::Mean(x)))
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let v = Matrix::column((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        self.push(v, Op::SumRows(x))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let mut v = m.clone();
        for r in 0..m.rows() {
            let n = crate::tensor::norm(m.row(r)).max(NORM_FLOOR);
            for a in v.row_mut(r) {
                *a /= n;
            }
        }
        self.push(v, Op::L2NormalizeRows(x))
    }

    /// Frobenius inner product of two same-shape nodes, as a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let v = Matrix::scalar(crate::tensor::dot(self.value(a).as_slice(), self.value(b).as_slice()));
        Ok(self.push(v, Op::Dot(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| AutodiffError::Invalid { op: "concat_rows", msg: "no operands".into() })?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(AutodiffError::ShapeMismatch { op: "concat_rows", lhs: self.shape(first), rhs: s });
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).as_slice());
        }
        Ok(self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// Picks the listed `(row, col)` entries into an `n x 1` column.
    pub fn gather(&mut self, x: NodeId, indices: &[(usize, usize)]) -> Result<NodeId> {
        let m = self.value(x);
        let shape = m.shape();
        let mut out = Vec::with_capacity(indices.len());
        for &(row, col) in indices {
            if row >= shape.0 || col >= shape.1 {
                return Err(AutodiffError::IndexOutOfRange { op: "gather", row, col, shape });
            }
            out.push(m.get(row, col));
        }
        Ok(self.push(Matrix::column(out), Op::Gather(x, indices.to_vec())))
    }

    /// Row-wise `log sum exp`, as an `r x 1` column. With a mask, only
    /// entries whose mask bit is `true` participate; every row must keep at
    /// least one entry.
    pub fn logsumexp_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        if let Some(mask) = mask {
            if mask.len() != rows * cols {
                return Err(AutodiffError::ShapeMismatch { op: "logsumexp_rows", lhs: (rows, cols), rhs: (mask.len(), 1) });
            }
        }
        let keep = |r: usize, c: usize| mask.is_none_or(|mk| mk[r * cols + c]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = m.row(r);
            if !(0..cols).any(|c| keep(r, c)) {
                return Err(AutodiffError::Invalid { op: "logsumexp_rows", msg: format!("row {r} has no unmasked entries") });
            }
            let kept = (0..cols).filter(|&c| keep(r, c)).map(|c| row[c]);
            if kept.clone().any(|v| !v.is_finite()) {
                // Non-finite inputs propagate so callers can detect divergence.
                out.push(kept.map(f64::exp).sum::<f64>().ln());
                continue;
            }
            let max = kept.clone().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = kept.map(|v| (v - max).exp()).sum();
            out.push(max + s.ln());
        }
        let mask = mask.map(<[bool]>::to_vec);
        Ok(self.push(Matrix::column(out), Op::LogSumExpRows(x, mask)))
    }

    /// Clears every gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.as_mut_slice().fill(0.0);
        }
    }

    /// Accumulates `d root / d node` into every node reachable from `root`.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients again.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        // Per-call seed buffer so repeated calls accumulate cleanly.
        let mut upstream: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        upstream[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = upstream[i].take() else { continue };
            self.nodes[i].grad.add_assign(&g);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g, &mut upstream);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, op: &Op, g: &Matrix, up: &mut [Option<Matrix>]) {
        let mut send = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut up[id.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, g.matmul(&vb.transpose()));
                }
                if self.needs(*b) {
                    send(*b, va.transpose().matmul(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |u, v| u * v));
                send(*b, g.zip_map(self.value(*a), |u, v| u * v));
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                let mut acc = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (a, v) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                send(*row, acc);
            }
            Op::Scale(x, f) => send(*x, g.map(|v| v * f)),
            Op::AddConst(x) => send(*x, g.clone()),
            Op::AddScalar(x, s) => {
                send(*x, g.clone());
                send(*s, Matrix::scalar(g.sum()));
            }
            Op::MulScalar(x, s) => {
                let f = self.scalar_value(*s);
                send(*x, g.map(|v| v * f));
                let ds = crate::tensor::dot(g.as_slice(), self.value(*x).as_slice());
                send(*s, Matrix::scalar(ds));
            }
            Op::DivScalar(x, s) => {
                let f = self.scalar_value(*s);
                send(*x, g.map(|v| v / f));
                let ds = -crate::tensor::dot(g.as_slice(), self.value(*x).as_slice()) / (f * f);
                send(*s, Matrix::scalar(ds));
            }
            Op::Exp(x) => send(*x, g.zip_map(out, |u, y| u * y)),
            Op::Log(x) => send(*x, g.zip_map(self.value(*x), |u, a| if a > LOG_FLOOR { u / a } else { 0.0 })),
            Op::Tanh(x) => send(*x, g.zip_map(out, |u, y| u * (1.0 - y * y))),
            Op::Relu(x) => send(*x, g.zip_map(self.value(*x), |u, a| if a > 0.0 { u } else { 0.0 })),
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                send(*x, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                send(*x, Matrix::filled(r, c, g.as_slice()[0] / (r * c) as f64));
            }
            Op::SumRows(x) => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row).fill(g.get(row, 0));
                }
                send(*x, d);
            }
            Op::L2NormalizeRows(x) => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    let n = crate::tensor::norm(vx.row(r));
                    if n < NORM_FLOOR {
                        d.row_mut(r).iter_mut().zip(g.row(r)).for_each(|(o, u)| *o = u / NORM_FLOOR);
                        continue;
                    }
                    let y = out.row(r);
                    let proj = crate::tensor::dot(y, g.row(r));
                    for ((o, u), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y) {
                        *o = (u - yv * proj) / n;
                    }
                }
                send(*x, d);
            }
            Op::Dot(a, b) => {
                let s = g.as_slice()[0];
                send(*a, self.value(*b).map(|v| v * s));
                send(*b, self.value(*a).map(|v| v * s));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                    send(p, Matrix::from_vec(r, c, slice));
                    offset += r;
                }
            }
            Op::Transpose(x) => send(*x, g.transpose()),
            Op::Gather(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for (k, &(row, col)) in idx.iter().enumerate() {
                    d.set(row, col, d.get(row, col) + g.get(k, 0));
                }
                send(*x, d);
            }
            Op::LogSumExpRows(x, mask) => {
                let vx = self.value(*x);
                let (r, c) = vx.shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    let lse = out.get(row, 0);
                    let gr = g.get(row, 0);
                    for col in 0..c {
                        let keep = mask.as_ref().is_none_or(|m| m[row * c + col]);
                        if keep {
                            d.set(row, col, gr * (vx.get(row, col) - lse).exp());
                        }
                    }
                }
                send(*x, d);
            }
        }
    }

    /// Runs a fresh backward pass from `root` and returns the gradient of every
    /// parameter in `store`, flattened in the store's order. Parameters not on
    /// the tape (or unreachable from `root`) contribute zeros.
    pub fn grad_vector(&mut self, root: NodeId, store: &ParamStore) -> Result<Vec<f64>> {
        self.grad_vector_scoped(root, store, None)
    }

    /// Like [`Graph::grad_vector`], restricted to the named parameters, which
    /// are emitted in store order.
    pub fn grad_vector_scoped(&mut self, root: NodeId, store: &ParamStore, scope: Option<&[String]>) -> Result<Vec<f64>> {
        self.zero_grad();
        self.backward(root)?;
        let mut out = Vec::new();
        for (name, value) in store.iter() {
            if let Some(scope) = scope {
                if !scope.iter().any(|s| s == name) {
                    continue;
                }
            }
            match self.params.get(name) {
                Some(&id) => out.extend_from_slice(self.grad(id).as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, value.len())),
            }
        }
        Ok(out)
    }

    /// Gradient of every tape parameter, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Matrix> {
        self.params.iter().map(|(k, &id)| (k.clone(), self.grad(id).clone())).collect()
    }
}

/// Named parameter arrays, ordered lexicographically by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.values().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Number of scalar entries covered by `names` (names absent from the
    /// store count as zero).
    pub fn scoped_len(&self, names: &[String]) -> usize {
        names.iter().filter_map(|n| self.params.get(n)).map(Matrix::len).sum()
    }

    /// Overwrites every parameter from a flat vector laid out as [`flatten`](Self::flatten) produces.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_values();
        if flat.len() != expected {
            return Err(AutodiffError::FlatLength { expected, got: flat.len() });
        }
        let mut offset = 0;
        for m in self.params.values_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
