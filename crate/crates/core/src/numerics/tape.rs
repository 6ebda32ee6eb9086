//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in evaluation
//! order. [`Tape::backward`] walks that record in reverse once, so the
//! recorded order is always a valid topological order. Sparse adjacency is
//! fixed topology; only edge values and dense operands carry gradients.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::ops;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graphio::SparseAdjacency;

type NodeId = usize;

#[derive(Clone)]
enum EdgeValues {
    Const(Rc<Vec<f64>>),
    Var(NodeId),
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowDot(NodeId, NodeId),
    RowNorm(NodeId, f64),
    RowSoftmax(NodeId, f64),
    Sigmoid(NodeId),
    Elu(NodeId),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Pow(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Rc<Vec<usize>>),
    EdgeGather {
        target: NodeId,
        source: NodeId,
        adj: Rc<SparseAdjacency>,
    },
    EdgeSoftmax {
        logits: NodeId,
        adj: Rc<SparseAdjacency>,
    },
    Spmm {
        adj: Rc<SparseAdjacency>,
        values: EdgeValues,
        dense: NodeId,
    },
    PairDot {
        input: NodeId,
        pairs: Rc<Vec<(usize, usize)>>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        lse: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        rows: Rc<Vec<usize>>,
        targets: Rc<Vec<usize>>,
    },
    BceWithLogits {
        logits: NodeId,
        rows: Rc<Vec<usize>>,
        targets: Rc<Tensor>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Parameters are bound lazily through [`Tape::param`]; binding the same
/// [`ParamId`] twice returns the same leaf. Frozen parameters enter as
/// constants and receive exactly zero gradient.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, NodeId>>,
    frozen: HashSet<ParamId>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient of an arbitrary recorded value, if it received any.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|&node| self.by_node[node].as_ref())
    }

    /// One gradient per stored parameter; untouched or frozen parameters
    /// get zeros of their own shape.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape on which `frozen` parameters are bound as constants.
    pub fn with_frozen(frozen: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            frozen: frozen.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Differentiable leaf not tied to a stored parameter.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf (a constant when frozen).
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let trainable = !self.frozen.contains(&id);
        let var = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.bound.borrow().clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| nodes[id].value.as_ref();
    let wants = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.matmul_nt(val(*b)).expect("shape"));
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, val(*a).matmul_tn(g).expect("shape"));
            }
        }
        Op::MatMulNt(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.matmul(val(*b)).expect("shape"));
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.matmul_tn(val(*a)).expect("shape"));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if wants(*a) {
                accumulate(grads, nodes, *a, g.zip_map(bv, |x, y| x / y).unwrap());
            }
            if wants(*b) {
                let out = node.value.as_ref();
                let t = g.zip_map(out, |x, o| x * o).unwrap();
                accumulate(grads, nodes, *b, t.zip_map(bv, |x, y| -x / y).unwrap());
            }
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if wants(*b) {
                accumulate(grads, nodes, *b, ops::column_sums(g));
            }
        }
        Op::MulCol(a, b) => {
            let (r, c) = g.dims2();
            let av = val(*a);
            let bv = val(*b);
            if wants(*a) {
                let t = Tensor::from_fn(r, c, |i, j| g.get(i, j) * bv.data()[i]);
                accumulate(grads, nodes, *a, t);
            }
            if wants(*b) {
                let t = Tensor::from_fn(r, 1, |i, _| {
                    g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                });
                accumulate(grads, nodes, *b, t);
            }
        }
        Op::Scale(a, f) => accumulate(grads, nodes, *a, g.scale(*f)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Sum(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, Tensor::full(&shape, g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let n = av.len().max(1) as f64;
            accumulate(grads, nodes, *a, Tensor::full(av.shape(), g.item() / n));
        }
        Op::RowDot(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let (r, c) = av.dims2();
            if wants(*a) {
                let t = Tensor::from_fn(r, c, |i, j| g.data()[i] * bv.get(i, j));
                accumulate(grads, nodes, *a, t);
            }
            if wants(*b) {
                let t = Tensor::from_fn(r, c, |i, j| g.data()[i] * av.get(i, j));
                accumulate(grads, nodes, *b, t);
            }
        }
        Op::RowNorm(a, eps) => {
            let av = val(*a);
            let (r, c) = av.dims2();
            let out = node.value.data();
            let t = Tensor::from_fn(r, c, |i, j| {
                if out[i] > *eps {
                    g.data()[i] * av.get(i, j) / out[i]
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, t);
        }
        Op::RowSoftmax(a, temperature) => {
            let y = node.value.as_ref();
            let (r, c) = y.dims2();
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let yr = y.row(i);
                let gr = g.row(i);
                let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, (yv, gv)) in t.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = yv * (gv - inner) / temperature;
                }
            }
            accumulate(grads, nodes, *a, t);
        }
        Op::Sigmoid(a) => {
            let t = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::Elu(a) => {
            let t = g
                .zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * x.exp() })
                .unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::LeakyRelu(a, slope) => {
            let t = g
                .zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope })
                .unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::Relu(a) => {
            let t = g
                .zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                .unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::Softplus(a) => {
            let t = g.zip_map(val(*a), |gv, x| gv * ops::sigmoid(x)).unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::Abs(a) => {
            let t = g.zip_map(val(*a), |gv, x| gv * x.signum()).unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::Pow(a, p) => {
            let t = g
                .zip_map(val(*a), |gv, x| {
                    if *p == 1.0 {
                        gv
                    } else {
                        gv * p * x.powf(p - 1.0)
                    }
                })
                .unwrap();
            accumulate(grads, nodes, *a, t);
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            accumulate(grads, nodes, *a, g.slice_cols(0, ca));
            accumulate(grads, nodes, *b, g.slice_cols(ca, ca + cb));
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).dims2();
            let w = g.cols();
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r {
                t.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *a, t);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = val(*a).dims2();
            let mut t = Tensor::zeros(&[r, c]);
            for (k, &i) in idx.iter().enumerate() {
                for (o, v) in t.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *a, t);
        }
        Op::EdgeGather {
            target,
            source,
            adj,
        } => {
            let n = adj.n();
            let mut gt = vec![0.0; n];
            let mut gs = vec![0.0; n];
            for i in 0..n {
                for k in adj.row_range(i) {
                    gt[i] += g.data()[k];
                    gs[adj.cols()[k]] += g.data()[k];
                }
            }
            accumulate(grads, nodes, *target, Tensor::column(gt));
            accumulate(grads, nodes, *source, Tensor::column(gs));
        }
        Op::EdgeSoftmax { logits, adj } => {
            let y = node.value.data();
            let mut t = vec![0.0; y.len()];
            for i in 0..adj.n() {
                let range = adj.row_range(i);
                let inner: f64 = range.clone().map(|k| y[k] * g.data()[k]).sum();
                for k in range {
                    t[k] = y[k] * (g.data()[k] - inner);
                }
            }
            accumulate(grads, nodes, *logits, Tensor::column(t));
        }
        Op::Spmm { adj, values, dense } => {
            let dv = val(*dense);
            let weights: &[f64] = match values {
                EdgeValues::Const(w) => w,
                EdgeValues::Var(id) => val(*id).data(),
            };
            if wants(*dense) {
                let mut t = Tensor::zeros(dv.shape());
                for i in 0..adj.n() {
                    for k in adj.row_range(i) {
                        let j = adj.cols()[k];
                        let w = weights[k];
                        for (o, gv) in t.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += w * gv;
                        }
                    }
                }
                accumulate(grads, nodes, *dense, t);
            }
            if let EdgeValues::Var(id) = values {
                if wants(*id) {
                    let mut t = vec![0.0; adj.num_edges()];
                    for i in 0..adj.n() {
                        for k in adj.row_range(i) {
                            t[k] = super::tensor::dot(g.row(i), dv.row(adj.cols()[k]));
                        }
                    }
                    accumulate(grads, nodes, *id, Tensor::column(t));
                }
            }
        }
        Op::PairDot { input, pairs } => {
            let av = val(*input);
            let mut t = Tensor::zeros(av.shape());
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let gp = g.data()[p];
                let rj: Vec<f64> = av.row(j).to_vec();
                let ri: Vec<f64> = av.row(i).to_vec();
                for (o, v) in t.row_mut(i).iter_mut().zip(&rj) {
                    *o += gp * v;
                }
                for (o, v) in t.row_mut(j).iter_mut().zip(&ri) {
                    *o += gp * v;
                }
            }
            accumulate(grads, nodes, *input, t);
        }
        Op::Attention { q, k, v, scale, lse } => {
            let (dq, dk, dv) = ops::attention_backward(
                val(*q),
                val(*k),
                val(*v),
                &node.value,
                g,
                *scale,
                lse,
            );
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
        } => {
            let z = val(*logits);
            let mut t = Tensor::zeros(z.shape());
            let scale = g.item() / rows.len() as f64;
            for (&r, &target) in rows.iter().zip(targets.iter()) {
                let p = ops::softmax_slice(z.row(r), 1.0);
                for (c, (o, pv)) in t.row_mut(r).iter_mut().zip(&p).enumerate() {
                    let y = if c == target { 1.0 } else { 0.0 };
                    *o += scale * (pv - y);
                }
            }
            accumulate(grads, nodes, *logits, t);
        }
        Op::BceWithLogits {
            logits,
            rows,
            targets,
        } => {
            let z = val(*logits);
            let c = z.cols();
            let mut t = Tensor::zeros(z.shape());
            let scale = g.item() / (rows.len() * c) as f64;
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    let p = ops::sigmoid(z.get(r, j));
                    t.set(r, j, scale * (p - targets.get(k, j)));
                }
            }
            accumulate(grads, nodes, *logits, t);
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_nt(&other.value())?;
        Ok(self.binary(other, v, Op::MatMulNt(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x + y).map_err(|_| dim_err("add", &a, &b))?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x - y).map_err(|_| dim_err("sub", &a, &b))?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y).map_err(|_| dim_err("mul", &a, &b))?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Element-wise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y).map_err(|_| dim_err("div", &a, &b))?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    /// Adds a `[1×c]` row to every row of `self`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if a.shape().len() != 2 || b.shape() != [1, a.cols()] {
            return Err(dim_err("add_row", &a, &b));
        }
        let c = a.cols();
        let mut v = (*a).clone();
        for (k, x) in v.data_mut().iter_mut().enumerate() {
            *x += b.data()[k % c];
        }
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Scales row `i` of `self` by `col[i]`, `col` being `[r×1]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), col.value());
        if a.shape().len() != 2 || b.shape() != [a.rows(), 1] {
            return Err(dim_err("mul_col", &a, &b));
        }
        let c = a.cols();
        let mut v = (*a).clone();
        for (k, x) in v.data_mut().iter_mut().enumerate() {
            *x *= b.data()[k / c];
        }
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let v = self.value().scale(factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.len().max(1) as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Per-row inner product, `[r×c]·[r×c] → [r×1]`.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.shape().len() != 2 {
            return Err(dim_err("row_dot", &a, &b));
        }
        let v = Tensor::column(
            (0..a.rows())
                .map(|i| super::tensor::dot(a.row(i), b.row(i)))
                .collect(),
        );
        Ok(self.binary(other, v, Op::RowDot(self.id, other.id)))
    }

    /// Per-row Euclidean norm clamped below at `eps`, `[r×c] → [r×1]`.
    pub fn row_norm(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let v = Tensor::column(
            (0..a.rows())
                .map(|i| super::tensor::dot(a.row(i), a.row(i)).sqrt().max(eps))
                .collect(),
        );
        self.unary(v, Op::RowNorm(self.id, eps))
    }

    /// Softmax of `self / temperature` along each row.
    pub fn row_softmax(self, temperature: f64) -> Result<Var<'t>> {
        let v = ops::row_softmax(&self.value(), temperature)?;
        Ok(self.unary(v, Op::RowSoftmax(self.id, temperature)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(ops::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn elu(self) -> Var<'t> {
        let v = self.value().map(ops::elu);
        self.unary(v, Op::Elu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(ops::softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// Element-wise power; intended for nonnegative inputs.
    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Pow(self.id, p))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().concat_cols(&other.value())?;
        Ok(self.binary(other, v, Op::ConcatCols(self.id, other.id)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 || start > end || end > a.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} on shape {:?}",
                a.shape()
            )));
        }
        let v = a.slice_cols(start, end);
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn gather_rows(self, indices: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows()) {
            return Err(Error::Structural(format!(
                "row index {bad} out of range for {} rows",
                a.rows()
            )));
        }
        let v = a.select_rows(&indices);
        Ok(self.unary(v, Op::GatherRows(self.id, indices)))
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// Blocked softmax attention `softmax(q·kᵀ·scale)·v`, recomputed in the
    /// backward pass instead of storing the full weight matrix.
    pub fn attention(self, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (out, lse) = ops::attention_forward(&qv, &kv, &vv, scale)?;
        let rg = self.tape.requires(&[self.id, k.id, v.id]);
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                scale,
                lse,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `self` (logits) over `rows` against class
    /// `targets`.
    pub fn cross_entropy(self, rows: Rc<Vec<usize>>, targets: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let z = self.value();
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(Error::Contract(format!(
                "cross_entropy needs matching nonempty rows/targets, got {} / {}",
                rows.len(),
                targets.len()
            )));
        }
        let c = z.cols();
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            if r >= z.rows() || t >= c {
                return Err(Error::Structural(format!("row {r} / class {t} out of range")));
            }
            total += ops::log_sum_exp(z.row(r)) - z.get(r, t);
        }
        let v = Tensor::scalar(total / rows.len() as f64);
        Ok(self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                rows,
                targets,
            },
        ))
    }

    /// Mean binary cross-entropy over `rows × all columns`; `targets` holds
    /// one row per entry of `rows`.
    pub fn bce_with_logits(self, rows: Rc<Vec<usize>>, targets: Rc<Tensor>) -> Result<Var<'t>> {
        let z = self.value();
        if rows.is_empty() || targets.shape() != [rows.len(), z.cols()] {
            return Err(Error::Contract("bce_with_logits target shape mismatch".into()));
        }
        let mut total = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            for j in 0..z.cols() {
                let x = z.get(r, j);
                let y = targets.get(k, j);
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let v = Tensor::scalar(total / (rows.len() * z.cols()) as f64);
        Ok(self.unary(
            v,
            Op::BceWithLogits {
                logits: self.id,
                rows,
                targets,
            },
        ))
    }
}

/// Edge-level operations over a fixed sparse topology.
impl Tape {
    /// `e_k = target[i] + source[j]` for every stored edge `k = (i, j)`;
    /// both inputs are `[n×1]`, the result `[E×1]`.
    pub fn edge_gather<'t>(
        &'t self,
        adj: &Rc<SparseAdjacency>,
        target: Var<'t>,
        source: Var<'t>,
    ) -> Result<Var<'t>> {
        let (t, s) = (target.value(), source.value());
        if t.shape() != [adj.n(), 1] || s.shape() != [adj.n(), 1] {
            return Err(dim_err("edge_gather", &t, &s));
        }
        let mut out = Vec::with_capacity(adj.num_edges());
        for i in 0..adj.n() {
            for &j in adj.neighbors(i) {
                out.push(t.data()[i] + s.data()[j]);
            }
        }
        let rg = self.requires(&[target.id, source.id]);
        Ok(self.push(
            Tensor::column(out),
            Op::EdgeGather {
                target: target.id,
                source: source.id,
                adj: Rc::clone(adj),
            },
            rg,
        ))
    }

    /// Softmax of edge logits within each row's neighbourhood.
    pub fn edge_softmax<'t>(&'t self, adj: &Rc<SparseAdjacency>, logits: Var<'t>) -> Result<Var<'t>> {
        let l = logits.value();
        if l.shape() != [adj.num_edges(), 1] {
            return Err(Error::Contract(format!(
                "edge_softmax expects [{}, 1], got {:?}",
                adj.num_edges(),
                l.shape()
            )));
        }
        let mut out = vec![0.0; l.len()];
        for i in 0..adj.n() {
            let range = adj.row_range(i);
            let w = ops::softmax_slice(&l.data()[range.clone()], 1.0);
            out[range].copy_from_slice(&w);
        }
        let rg = self.requires(&[logits.id]);
        Ok(self.push(
            Tensor::column(out),
            Op::EdgeSoftmax {
                logits: logits.id,
                adj: Rc::clone(adj),
            },
            rg,
        ))
    }

    /// Sparse-dense product with constant edge weights.
    pub fn spmm_const<'t>(
        &'t self,
        adj: &Rc<SparseAdjacency>,
        weights: Rc<Vec<f64>>,
        dense: Var<'t>,
    ) -> Result<Var<'t>> {
        let out = ops::sparse_dense_matmul_weighted(adj, Some(&weights), &dense.value())?;
        let rg = self.requires(&[dense.id]);
        Ok(self.push(
            out,
            Op::Spmm {
                adj: Rc::clone(adj),
                values: EdgeValues::Const(weights),
                dense: dense.id,
            },
            rg,
        ))
    }

    /// Sparse-dense product with differentiable `[E×1]` edge weights.
    pub fn spmm<'t>(&'t self, adj: &Rc<SparseAdjacency>, weights: Var<'t>, dense: Var<'t>) -> Result<Var<'t>> {
        let w = weights.value();
        if w.shape() != [adj.num_edges(), 1] {
            return Err(Error::Contract(format!(
                "spmm weights expect [{}, 1], got {:?}",
                adj.num_edges(),
                w.shape()
            )));
        }
        let out = ops::sparse_dense_matmul_weighted(adj, Some(w.data()), &dense.value())?;
        let rg = self.requires(&[weights.id, dense.id]);
        Ok(self.push(
            out,
            Op::Spmm {
                adj: Rc::clone(adj),
                values: EdgeValues::Var(weights.id),
                dense: dense.id,
            },
            rg,
        ))
    }

    /// `out_p = input[i]·input[j]` for each pair `p = (i, j)`.
    pub fn pair_dot<'t>(&'t self, input: Var<'t>, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var<'t>> {
        let a = input.value();
        let n = a.rows();
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= n || j >= n {
                return Err(Error::Structural(format!("pair ({i}, {j}) out of range")));
            }
            out.push(super::tensor::dot(a.row(i), a.row(j)));
        }
        let rg = self.requires(&[input.id]);
        Ok(self.push(
            Tensor::column(out),
            Op::PairDot {
                input: input.id,
                pairs,
            },
            rg,
        ))
    }
}
