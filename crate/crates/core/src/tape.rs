//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`TapeGraph`] records scalar operations in execution order. Every node
//! stores its value, the ids of its parents and the local partial derivative
//! with respect to each parent, so the backward sweep is a single reverse
//! walk over the list. [`TapeGraph::stop_gradient`] records a node that
//! forwards its operand's value but receives adjoints without passing them
//! on, which is what the surrogate objectives need to freeze individual
//! paths of an expression.
//!
//! Non-finite values are rejected when they are recorded.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("operand belongs to a different graph")]
    CrossGraph,
    #[error("{op:?} produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("log of non-positive operand {0}")]
    LogDomain(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("{op:?} expects {expected} operand(s), got {got}")]
    Arity {
        op: OpKind,
        expected: &'static str,
        got: usize,
    },
    #[error("{0:?} cannot be recorded through `record`")]
    NotRecordable(OpKind),
    #[error("finite-difference probe produced a non-finite value at coordinate {0}")]
    NonFiniteProbe(usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Operation recorded at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sum,
    LogSumExp,
    Max,
}

/// Index of a node inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A recorded scalar: its forward value plus a handle into the owning graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeScalar {
    value: f64,
    node: NodeId,
    graph: u64,
}

impl TapeScalar {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn node(&self) -> NodeId {
        self.node
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    start: u32,
    len: u32,
}

/// Append-only list of recorded operations.
///
/// Parents always precede their children, so a reverse walk from any root
/// visits each node once after all of its consumers.
#[derive(Debug)]
pub struct TapeGraph {
    id: u64,
    values: Vec<f64>,
    nodes: Vec<Node>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    leaves: Vec<NodeId>,
}

impl Default for TapeGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl TapeGraph {
    pub fn new() -> Self {
        Self::with_capacity(64)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        TapeGraph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::with_capacity(nodes),
            nodes: Vec::with_capacity(nodes),
            parents: Vec::with_capacity(nodes * 2),
            partials: Vec::with_capacity(nodes * 2),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf ids in creation order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, node: NodeId) -> f64 {
        self.values[node.index()]
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.nodes[node.index()].kind
    }

    /// Parent ids of `node`, in operand order.
    pub fn parents(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let n = self.nodes[node.index()];
        self.parents[n.start as usize..(n.start + n.len) as usize]
            .iter()
            .map(|&p| NodeId(p))
    }

    fn push(&mut self, kind: OpKind, value: f64, edges: &[(NodeId, f64)]) -> Result<TapeScalar> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: kind });
        }
        let start = self.parents.len() as u32;
        for &(p, d) in edges {
            self.parents.push(p.0);
            self.partials.push(d);
        }
        let node = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            kind,
            start,
            len: edges.len() as u32,
        });
        self.values.push(value);
        Ok(TapeScalar {
            value,
            node,
            graph: self.id,
        })
    }

    fn check(&self, x: &TapeScalar) -> Result<()> {
        if x.graph == self.id {
            Ok(())
        } else {
            Err(TapeError::CrossGraph)
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: f64) -> Result<TapeScalar> {
        let x = self.push(OpKind::Leaf, value, &[])?;
        self.leaves.push(x.node);
        Ok(x)
    }

    pub fn leaves_from(&mut self, values: &[f64]) -> Result<Vec<TapeScalar>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Result<TapeScalar> {
        self.push(OpKind::Constant, value, &[])
    }

    /// Forwards `x`'s value; the backward sweep stops here.
    ///
    /// Adjoints still accumulate on the returned node, so
    /// [`Gradients::wrt`] on it reports the derivative of the root with
    /// respect to the frozen copy.
    pub fn stop_gradient(&mut self, x: TapeScalar) -> Result<TapeScalar> {
        self.check(&x)?;
        self.push(OpKind::StopGradient, x.value, &[])
    }

    /// Records `op` applied to `operands`.
    ///
    /// Binary kinds take exactly two operands, unary kinds one, and the
    /// reductions (`Sum`, `LogSumExp`, `Max`) at least one.
    pub fn record(&mut self, op: OpKind, operands: &[TapeScalar]) -> Result<TapeScalar> {
        for x in operands {
            self.check(x)?;
        }
        let arity = |expected: &'static str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(TapeError::Arity {
                    op,
                    expected,
                    got: operands.len(),
                })
            }
        };
        match op {
            OpKind::Leaf | OpKind::Constant | OpKind::StopGradient => {
                Err(TapeError::NotRecordable(op))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                arity("2", operands.len() == 2)?;
                let (a, b) = (operands[0], operands[1]);
                let (va, vb) = (a.value, b.value);
                match op {
                    OpKind::Add => self.push(op, va + vb, &[(a.node, 1.0), (b.node, 1.0)]),
                    OpKind::Sub => self.push(op, va - vb, &[(a.node, 1.0), (b.node, -1.0)]),
                    OpKind::Mul => self.push(op, va * vb, &[(a.node, vb), (b.node, va)]),
                    _ => {
                        if vb == 0.0 {
                            return Err(TapeError::DivisionByZero);
                        }
                        let q = va / vb;
                        self.push(op, q, &[(a.node, 1.0 / vb), (b.node, -q / vb)])
                    }
                }
            }
            OpKind::Neg
            | OpKind::Exp
            | OpKind::Log
            | OpKind::Tanh
            | OpKind::Sigmoid
            | OpKind::Square => {
                arity("1", operands.len() == 1)?;
                let a = operands[0];
                let v = a.value;
                let (value, d) = match op {
                    OpKind::Neg => (-v, -1.0),
                    OpKind::Exp => {
                        let e = v.exp();
                        (e, e)
                    }
                    OpKind::Log => {
                        if v <= 0.0 {
                            return Err(TapeError::LogDomain(v));
                        }
                        (v.ln(), 1.0 / v)
                    }
                    OpKind::Tanh => {
                        let t = v.tanh();
                        (t, 1.0 - t * t)
                    }
                    OpKind::Sigmoid => {
                        let s = sigmoid(v);
                        (s, s * (1.0 - s))
                    }
                    _ => (v * v, 2.0 * v),
                };
                self.push(op, value, &[(a.node, d)])
            }
            OpKind::Sum | OpKind::LogSumExp | OpKind::Max => {
                arity(">= 1", !operands.is_empty())?;
                match op {
                    OpKind::Sum => {
                        let total: f64 = operands.iter().map(|x| x.value).sum();
                        let edges: Vec<_> = operands.iter().map(|x| (x.node, 1.0)).collect();
                        self.push(op, total, &edges)
                    }
                    OpKind::LogSumExp => {
                        let vals: Vec<f64> = operands.iter().map(|x| x.value).collect();
                        let (lse, weights) = log_sum_exp_with_softmax(&vals);
                        let edges: Vec<_> = operands
                            .iter()
                            .zip(weights)
                            .map(|(x, w)| (x.node, w))
                            .collect();
                        self.push(op, lse, &edges)
                    }
                    _ => {
                        // First maximiser takes the whole adjoint.
                        let mut best = 0;
                        for (i, x) in operands.iter().enumerate() {
                            if x.value > operands[best].value {
                                best = i;
                            }
                        }
                        let edges: Vec<_> = operands
                            .iter()
                            .enumerate()
                            .map(|(i, x)| (x.node, if i == best { 1.0 } else { 0.0 }))
                            .collect();
                        self.push(op, operands[best].value, &edges)
                    }
                }
            }
        }
    }

    pub fn add(&mut self, a: TapeScalar, b: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: TapeScalar, b: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: TapeScalar, b: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: TapeScalar, b: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Div, &[a, b])
    }

    pub fn neg(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Neg, &[a])
    }

    pub fn exp(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Log, &[a])
    }

    pub fn tanh(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn square(&mut self, a: TapeScalar) -> Result<TapeScalar> {
        self.record(OpKind::Square, &[a])
    }

    pub fn sum(&mut self, xs: &[TapeScalar]) -> Result<TapeScalar> {
        self.record(OpKind::Sum, xs)
    }

    pub fn log_sum_exp(&mut self, xs: &[TapeScalar]) -> Result<TapeScalar> {
        self.record(OpKind::LogSumExp, xs)
    }

    pub fn max(&mut self, xs: &[TapeScalar]) -> Result<TapeScalar> {
        self.record(OpKind::Max, xs)
    }

    /// `a * c` for a plain constant `c`.
    pub fn scale(&mut self, a: TapeScalar, c: f64) -> Result<TapeScalar> {
        let c = self.constant(c)?;
        self.mul(a, c)
    }

    /// `a + c` for a plain constant `c`.
    pub fn shift(&mut self, a: TapeScalar, c: f64) -> Result<TapeScalar> {
        let c = self.constant(c)?;
        self.add(a, c)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: TapeScalar) -> Result<Gradients> {
        self.backward_seeded(&[(root, 1.0)])
    }

    /// Reverse sweep from a weighted set of roots: the result is the
    /// gradient of `sum_k seed_k * root_k`.
    pub fn backward_seeded(&self, seeds: &[(TapeScalar, f64)]) -> Result<Gradients> {
        let mut adjoints = vec![0.0; self.nodes.len()];
        let mut top = 0;
        for (root, seed) in seeds {
            self.check(root)?;
            adjoints[root.node.index()] += seed;
            top = top.max(root.node.index() + 1);
        }
        for i in (0..top).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            let range = n.start as usize..(n.start + n.len) as usize;
            for (&p, &d) in self.parents[range.clone()]
                .iter()
                .zip(&self.partials[range])
            {
                adjoints[p as usize] += a * d;
            }
        }
        Ok(Gradients {
            graph: self.id,
            adjoints,
        })
    }

    /// Gradient map over every leaf of the graph; leaves the root does not
    /// reach map to zero.
    pub fn gradient_map(&self, root: TapeScalar) -> Result<BTreeMap<NodeId, f64>> {
        let g = self.backward(root)?;
        Ok(self
            .leaves
            .iter()
            .map(|&leaf| (leaf, g.adjoints[leaf.index()]))
            .collect())
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Derivative of the root with respect to `x`.
    ///
    /// # Panics
    /// If `x` was recorded on a different graph.
    pub fn wrt(&self, x: &TapeScalar) -> f64 {
        assert_eq!(x.graph, self.graph, "scalar from a different graph");
        self.adjoints[x.node.index()]
    }

    pub fn wrt_all(&self, xs: &[TapeScalar]) -> Vec<f64> {
        xs.iter().map(|x| self.wrt(x)).collect()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp together with the softmax of the inputs.
pub fn log_sum_exp_with_softmax(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return (m, vec![f64::NAN; xs.len()]);
    }
    let mut w: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (m + s.ln(), w)
}

/// Max relative error between tape gradients of `f` at `at` and central
/// differences with the given step: `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// `f` receives a fresh graph and the parameter leaves; it is re-evaluated
/// on fresh graphs at every probe point.
pub fn finite_diff_check<F>(f: F, at: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut TapeGraph, &[TapeScalar]) -> Result<TapeScalar>,
{
    if !(step > 0.0) {
        return Err(TapeError::InvalidStep(step));
    }
    let mut g = TapeGraph::new();
    let leaves = g.leaves_from(at)?;
    let root = f(&mut g, &leaves)?;
    let grads = g.backward(root)?;

    let eval = |point: &[f64], coord: usize| -> Result<f64> {
        let mut g = TapeGraph::new();
        let leaves = g.leaves_from(point)?;
        let v = f(&mut g, &leaves)
            .map_err(|_| TapeError::NonFiniteProbe(coord))?
            .value();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TapeError::NonFiniteProbe(coord))
        }
    };

    let mut worst: f64 = 0.0;
    let mut point = at.to_vec();
    for (j, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        point[j] = at[j] + step;
        let up = eval(&point, j)?;
        point[j] = at[j] - step;
        let down = eval(&point, j)?;
        point[j] = at[j];
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((analytic - numeric).abs() / (analytic.abs() + 1e-8));
    }
    Ok(worst)
}
