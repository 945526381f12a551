//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are created with
//! [`Graph::leaf`] (or [`Graph::bind`](crate::params) for parameter stores);
//! each op appends a node whose inputs already exist, so node order is a
//! topological order. [`Graph::backward`] walks the tape once in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// catches broken rules. Each variant scales one op's input gradients by 1.5.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    MatMul,
    Conv2d,
    SoftmaxRows,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Unfold {
        x: NodeId,
        k: usize,
    },
    Fold {
        p: NodeId,
        k: usize,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ConcatChannels(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    L2NormRows(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
        eps: f64,
    },
    DivRows(NodeId, NodeId),
    RowSum(NodeId),
    RowMin {
        x: NodeId,
        arg: Vec<usize>,
    },
    ColMax {
        x: NodeId,
        arg: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | DivRows(a, b) => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            Transpose(x)
            | Reshape(x)
            | SoftmaxRows(x)
            | Relu(x)
            | Tanh(x)
            | Exp(x)
            | Log(x)
            | Softplus(x)
            | Abs(x)
            | Scale(x, _)
            | AddScalar(x)
            | Sum(x)
            | Mean(x)
            | L1Norm(x)
            | L2NormRows(x)
            | RowSum(x) => vec![*x],
            Unfold { x, .. }
            | Upsample { x, .. }
            | NormalizeRows { x, .. }
            | RowMin { x, .. }
            | ColMax { x, .. }
            | SelectRows { x, .. } => vec![*x],
            Fold { p, .. } => vec![*p],
            ConcatChannels(xs) | ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if no path reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id` as a tensor; zeros when no path reached it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = &self.shapes[id.0];
        match self.get(id) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(true))
    }

    /// Copies a node's value into a new gradient-free leaf.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.numel(), 1);
        v.data()[0]
    }

    pub(crate) fn push_op(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs_grad, name)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        for input in op.inputs() {
            debug_assert!(input.0 < self.nodes.len(), "inputs must precede consumers");
        }
        self.nodes.push(Node {
            value: value.with_requires_grad(needs_grad),
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`. Every node is visited at most
    /// once, in reverse tape order; fan-out contributions are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn faulted(&self, kind: BackwardFault, mut g: Vec<f64>) -> Vec<f64> {
        if self.fault == Some(kind) {
            g.iter_mut().for_each(|v| *v *= 1.5);
        }
        g
    }

    fn backward_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shp = |id: NodeId| self.nodes[id.0].value.shape();
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(&mut da, gy, val(*b), m, n, k, false);
                    let da = self.faulted(BackwardFault::MatMul, da);
                    self.accum(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(&mut db, val(*a), gy, k, m, n, false);
                    let db = self.faulted(BackwardFault::MatMul, db);
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                self.accum(grads, *x, kernels::transpose(gy, c, r));
            }
            Op::Reshape(x) => self.accum(grads, *x, gy.to_vec()),
            Op::SoftmaxRows(x) => {
                let c = *shp(*x).last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                let dx = self.faulted(BackwardFault::SoftmaxRows, dx);
                self.accum(grads, *x, dx);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (co, pl, n) = (geom.c_out, geom.patch_len(), geom.out_len());
                if wants(*w) {
                    let mut dw = vec![0.0; co * pl];
                    kernels::gemm_nt(&mut dw, gy, cols, co, n, pl, false);
                    let dw = self.faulted(BackwardFault::Conv2d, dw);
                    self.accum(grads, *w, dw);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; pl * n];
                    kernels::gemm_tn(&mut dcols, val(*w), gy, pl, co, n, false);
                    let dx = self.faulted(BackwardFault::Conv2d, kernels::col2im(&dcols, geom));
                    self.accum(grads, *x, dx);
                }
            }
            Op::Unfold { x, k } => {
                let s = shp(*x);
                self.accum(grads, *x, kernels::fold(gy, s[0], s[1], s[2], *k));
            }
            Op::Fold { p, k } => {
                let s = node.value.shape();
                self.accum(grads, *p, kernels::unfold(gy, s[0], s[1], s[2], *k));
            }
            Op::Upsample { x, factor } => {
                let s = shp(*x);
                let dx = kernels::upsample_bilinear_adjoint(gy, s[0], s[1], s[2], *factor);
                self.accum(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = gy.iter().zip(y).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.accum(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = gy.iter().zip(y).map(|(g, v)| g * (1.0 - v * v)).collect();
                self.accum(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = gy.iter().zip(y).map(|(g, v)| g * v).collect();
                self.accum(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx = gy.iter().zip(val(*x)).map(|(g, v)| g / v).collect();
                self.accum(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx = gy.iter().zip(val(*x)).map(|(g, &v)| g * sigmoid(v)).collect();
                self.accum(grads, *x, dx);
            }
            Op::Abs(x) => {
                let dx = gy.iter().zip(val(*x)).map(|(g, &v)| g * sign(v)).collect();
                self.accum(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.to_vec());
                self.accum(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.to_vec());
                self.accum(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let da = gy.iter().zip(val(*b)).map(|(g, v)| g * v).collect();
                    self.accum(grads, *a, da);
                }
                if wants(*b) {
                    let db = gy.iter().zip(val(*a)).map(|(g, v)| g * v).collect();
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale(x, s) => self.accum(grads, *x, gy.iter().map(|g| g * s).collect()),
            Op::AddScalar(x) => self.accum(grads, *x, gy.to_vec()),
            Op::ConcatChannels(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = val(*x).len();
                    self.accum(grads, *x, gy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for x in xs {
                    let c = shp(*x)[1];
                    let mut dx = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dx.extend_from_slice(&gy[r * total + off..r * total + off + c]);
                    }
                    self.accum(grads, *x, dx);
                    off += c;
                }
            }
            Op::Sum(x) => self.accum(grads, *x, vec![gy[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accum(grads, *x, vec![gy[0] / n as f64; n]);
            }
            Op::L1Norm(x) => {
                let dx = val(*x).iter().map(|&v| gy[0] * sign(v)).collect();
                self.accum(grads, *x, dx);
            }
            Op::L2NormRows(x) => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (r, (dxr, xr)) in dx.chunks_mut(c).zip(val(*x).chunks(c)).enumerate() {
                    if y[r] > 0.0 {
                        for (d, v) in dxr.iter_mut().zip(xr) {
                            *d = gy[r] * v / y[r];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; y.len()];
                for (r, ((dxr, yr), gr)) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)).enumerate() {
                    if norms[r] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * dot) / norms[r];
                        }
                    } else {
                        for (d, &gv) in dxr.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::DivRows(x, v) => {
                let c = shp(*x)[1];
                let vv = val(*v);
                if wants(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for (r, (dxr, gr)) in dx.chunks_mut(c).zip(gy.chunks(c)).enumerate() {
                        for (d, g) in dxr.iter_mut().zip(gr) {
                            *d = g / vv[r];
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if wants(*v) {
                    let dv = gy
                        .chunks(c)
                        .zip(y.chunks(c))
                        .enumerate()
                        .map(|(r, (gr, yr))| -gr.iter().zip(yr).map(|(g, q)| g * q).sum::<f64>() / vv[r])
                        .collect();
                    self.accum(grads, *v, dv);
                }
            }
            Op::RowSum(x) => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (r, dxr) in dx.chunks_mut(c).enumerate() {
                    dxr.iter_mut().for_each(|d| *d = gy[r]);
                }
                self.accum(grads, *x, dx);
            }
            Op::RowMin { x, arg } => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &j) in arg.iter().enumerate() {
                    dx[r * c + j] = gy[r];
                }
                self.accum(grads, *x, dx);
            }
            Op::ColMax { x, arg } => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (j, &r) in arg.iter().enumerate() {
                    dx[r * c + j] = gy[j];
                }
                self.accum(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let c = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += gy[i * c + j];
                    }
                }
                self.accum(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
