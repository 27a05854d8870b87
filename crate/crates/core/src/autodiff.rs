//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert list: every op appends a node whose parents
//! have smaller indices, so plain reverse index order is a valid reverse
//! topological order and each node is visited exactly once by
//! [`Graph::backward`].
//!
//! ```
//! use dsnn_core::autodiff::Graph;
//! use dsnn_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let loss = g.sum(w).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target row {row} sums to {sum}, expected 1")]
    TargetNotNormalized { row: usize, sum: f64 },
    #[error("softmax cross-entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    MulConst(NodeId, Rc<Tensor>),
    StopGradient,
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        target: Rc<Tensor>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatCols(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SliceCols(a, _)
            | Op::MulConst(a, _)
            | Op::Sum(a) => self.requires_grad(*a),
            Op::SoftmaxCrossEntropy { logits, .. } => self.requires_grad(*logits),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`, the layout of a linear layer with `[out × in]` weights.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(v, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    /// Adds a bias vector `[n]` to every row of `x: [m×n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, &bj) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push(v, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    /// Elementwise product with a constant multiplier of the same shape.
    /// With a 0/1 multiplier this is mask application: masked entries get
    /// exactly zero gradient.
    pub fn mul_const(&mut self, a: NodeId, factor: Rc<Tensor>) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip_map(&factor, "mul_const", |x, m| x * m)?;
        self.push(v, Op::MulConst(a, factor), "mul_const")
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, "stop_gradient")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Mean over rows of `-Σ target · log softmax(logits)`.
    ///
    /// `target` rows must each sum to 1 within `1e-9`; one-hot rows give the
    /// usual classification loss, soft rows give a distillation loss.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: Rc<Tensor>) -> Result<NodeId> {
        let x = self.value(logits);
        let (n, c) = x.dims2("softmax_cross_entropy")?;
        x.check_same_shape(&target, "softmax_cross_entropy")?;
        if c < 2 {
            return Err(AutodiffError::TooFewClasses(c));
        }
        for row in 0..n {
            let sum: f64 = target.data()[row * c..(row + 1) * c].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AutodiffError::TargetNotNormalized { row, sum });
            }
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for row in 0..n {
            let z = &x.data()[row * c..(row + 1) * c];
            let t = &target.data()[row * c..(row + 1) * c];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = z.iter().map(|&v| (v - max).exp()).sum();
            let log_norm = norm.ln();
            let mut row_loss = 0.0;
            for j in 0..c {
                let log_p = z[j] - max - log_norm;
                probs[row * c + j] = log_p.exp();
                if t[j] != 0.0 {
                    row_loss -= t[j] * log_p;
                }
            }
            total += row_loss;
        }
        let probs = Tensor::new(vec![n, c], probs)?;
        let loss = Tensor::scalar(total / n as f64);
        self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    fn broadcast_binary(
        &self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            return Ok(x.zip_map(y, op, f)?);
        }
        if y.is_scalar() {
            let s = y.item();
            return Ok(x.map(|v| f(v, s)));
        }
        if x.is_scalar() {
            let s = x.item();
            return Ok(y.map(|v| f(s, v)));
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Contribution of `grad` wrt a broadcast operand: summed when the
    /// operand was a scalar.
    fn reduce_to(&self, id: NodeId, grad: Tensor) -> Tensor {
        let shape = self.value(id).shape();
        if shape == grad.shape() {
            grad
        } else {
            Tensor::full(shape, grad.sum())
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return Ok(());
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                if self.requires_grad(*a) {
                    let da = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g.matmul_tn(self.value(*a))?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    let da = self.reduce_to(*a, g.clone());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.reduce_to(*b, g.clone());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let da = self.reduce_to(*a, g.clone());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.reduce_to(*b, g.map(|v| -v));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = self.broadcast_product(g, vb);
                    let da = self.reduce_to(*a, da);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.broadcast_product(g, va);
                    let db = self.reduce_to(*b, db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.requires_grad(*b) {
                    let (m, n) = g.dims2("add_bias")?;
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (d, &v) in db.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = g.zip_map(&node.value, "tanh", |gv, t| gv * (1.0 - t * t))?;
                self.accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let n1 = self.value(*a).cols();
                let n2 = self.value(*b).cols();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.slice_cols(0, n1)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.slice_cols(n1, n2)?);
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let len = g.cols();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::MulConst(a, factor) => {
                let da = g.zip_map(factor, "mul_const", |gv, m| gv * m)?;
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, s));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let n = probs.rows() as f64;
                let s = g.item();
                let da = probs.zip_map(target, "softmax_cross_entropy", |p, t| s * (p - t) / n)?;
                self.accumulate(grads, *logits, da);
            }
        }
        Ok(())
    }

    fn broadcast_product(&self, g: &Tensor, other: &Tensor) -> Tensor {
        if other.shape() == g.shape() {
            g.zip_map(other, "mul", |a, b| a * b)
                .expect("shapes checked in forward")
        } else {
            let s = other.item();
            g.map(|v| v * s)
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

/// Row-wise softmax of a `[n×c]` matrix.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> std::result::Result<Tensor, TensorError> {
    let (n, c) = logits.dims2("softmax_rows")?;
    let mut out = vec![0.0; n * c];
    for row in 0..n {
        let z = &logits.data()[row * c..(row + 1) * c];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for j in 0..c {
            let e = ((z[j] - max) / temperature).exp();
            out[row * c + j] = e;
            norm += e;
        }
        for v in &mut out[row * c..(row + 1) * c] {
            *v /= norm;
        }
    }
    Tensor::new(vec![n, c], out)
}
