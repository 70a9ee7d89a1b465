//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] owns an append-only arena of nodes; every operation computes
//! its forward value eagerly and records enough to replay the chain rule.
//! Creation order is a topological order, so [`Graph::backward`] is a single
//! reverse sweep that visits each node exactly once. Graphs are rebuilt per
//! forward pass and live only as long as one backward.
//!
//! Leaves come in two flavors: [`Graph::leaf`] participates in gradients
//! (parameters, inputs under attack), [`Graph::constant`] does not (frozen
//! weights, noise draws). A node needs a gradient only if something beneath
//! it does; backward skips the rest, and [`Graph::stop_grad`] cuts the flag
//! so no adjoint reaches its argument.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

use crate::tensor::{gemm, Tensor, Trans};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a scalar loss, got {shape:?}")]
    NonScalarBackward { shape: (usize, usize) },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Normalization / reduction direction for axis-aware ops.
///
/// `Cols` means the operation runs across the columns of each row (a row of
/// softmax output sums to one); `Rows` runs down each column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Handle to a node. Cheap to copy; tied to the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    graph: u32,
    id: u32,
}

enum Op {
    Leaf,
    MatMul,
    MatMulNT,
    AddBias,
    Add,
    Sub,
    Mul,
    Div,
    ScaleShift { a: f64 },
    Elu,
    Sigmoid,
    Ln,
    Exp,
    ClampMin { floor: f64 },
    Softmax { axis: Axis },
    LogSoftmax { axis: Axis },
    MaxCols { argmax: Vec<usize> },
    MeanCols,
    VarCols { means: Vec<f64> },
    GroupMaxCols { argmax: Vec<usize> },
    CrossEntropy { labels: Vec<usize>, log_probs: Tensor },
    ConcatCols { widths: Vec<usize> },
    SliceCols { start: usize },
    MeanAll,
    StopGrad,
    /// Fused stochastic node; forward value precomputed, gradient w.r.t.
    /// the single parent stashed during construction (see `stoch`).
    Fused { grad_wrt_parent: Tensor },
}

struct Node {
    data: Tensor,
    grad: Option<Tensor>,
    op: Op,
    parents: Vec<u32>,
    needs_grad: bool,
}

static GRAPH_IDS: AtomicU32 = AtomicU32::new(1);

pub struct Graph {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Tracked leaf: receives a gradient in backward.
    pub fn leaf(&self, t: Tensor) -> Value {
        self.push_raw(t, Op::Leaf, vec![], true)
    }

    /// Untracked leaf: constants, frozen weights, noise.
    pub fn constant(&self, t: Tensor) -> Value {
        self.push_raw(t, Op::Leaf, vec![], false)
    }

    pub fn data(&self, v: Value) -> Ref<'_, Tensor> {
        self.check_value(v);
        Ref::map(self.nodes.borrow(), |n| &n[v.id as usize].data)
    }

    pub fn data_clone(&self, v: Value) -> Tensor {
        self.data(v).clone()
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.data(v).shape()
    }

    /// Scalar value of a 1 x 1 node.
    pub fn item(&self, v: Value) -> f64 {
        let out = self.data(v).item();
        out
    }

    /// Gradient accumulated in the last backward pass. Panics if backward
    /// never reached this node; use on tracked leaves.
    pub fn grad(&self, v: Value) -> Tensor {
        self.try_grad(v).expect("grad not populated; run backward first")
    }

    pub fn try_grad(&self, v: Value) -> Option<Tensor> {
        self.check_value(v);
        self.nodes.borrow()[v.id as usize].grad.clone()
    }

    /// Cached argmax column per row, if `v` was produced by `max_cols`.
    pub fn argmax_of(&self, v: Value) -> Option<Vec<usize>> {
        self.check_value(v);
        match &self.nodes.borrow()[v.id as usize].op {
            Op::MaxCols { argmax } => Some(argmax.clone()),
            _ => None,
        }
    }

    // ── construction ────────────────────────────────────────────────

    pub fn matmul(&self, a: Value, b: Value) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut out = Tensor::zeros(ar, bc);
        {
            let nodes = self.nodes.borrow();
            gemm(
                1.0,
                &nodes[a.id as usize].data,
                Trans::No,
                &nodes[b.id as usize].data,
                Trans::No,
                0.0,
                &mut out,
            );
        }
        Ok(self.push2(out, Op::MatMul, a, b))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&self, a: Value, b: Value) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(GraphError::ShapeMismatch {
                op: "matmul_nt",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut out = Tensor::zeros(ar, br);
        {
            let nodes = self.nodes.borrow();
            gemm(
                1.0,
                &nodes[a.id as usize].data,
                Trans::No,
                &nodes[b.id as usize].data,
                Trans::Yes,
                0.0,
                &mut out,
            );
        }
        Ok(self.push2(out, Op::MatMulNT, a, b))
    }

    /// `a + bias * ones^T`, broadcasting an m x 1 bias over columns.
    pub fn add_bias(&self, a: Value, bias: Value) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != ar || bc != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut out = self.data_clone(a);
        {
            let nodes = self.nodes.borrow();
            let b = &nodes[bias.id as usize].data;
            for r in 0..ar {
                let bv = b.at(r, 0);
                for c in 0..ac {
                    let v = out.at(r, c) + bv;
                    out.set(r, c, v);
                }
            }
        }
        Ok(self.push2(out, Op::AddBias, a, bias))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Value, b: Value) -> Result<Value> {
        self.zip("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise `a * x + b` with constant coefficients.
    pub fn scale_shift(&self, v: Value, a: f64, b: f64) -> Value {
        let mut out = self.data_clone(v);
        for x in out.data_mut() {
            *x = a * *x + b;
        }
        self.push1(out, Op::ScaleShift { a }, v)
    }

    pub fn elu(&self, v: Value) -> Value {
        let mut out = self.data_clone(v);
        for x in out.data_mut() {
            if *x <= 0.0 {
                *x = x.exp() - 1.0;
            }
        }
        self.push1(out, Op::Elu, v)
    }

    pub fn sigmoid(&self, v: Value) -> Value {
        let mut out = self.data_clone(v);
        for x in out.data_mut() {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
        self.push1(out, Op::Sigmoid, v)
    }

    /// Natural log; rejects non-positive entries.
    pub fn ln(&self, v: Value) -> Result<Value> {
        let mut out = self.data_clone(v);
        if out.iter().any(|&x| x <= 0.0) {
            return Err(GraphError::InvalidArg {
                op: "ln",
                msg: "non-positive entry".into(),
            });
        }
        for x in out.data_mut() {
            *x = x.ln();
        }
        Ok(self.push1(out, Op::Ln, v))
    }

    pub fn exp(&self, v: Value) -> Value {
        let mut out = self.data_clone(v);
        for x in out.data_mut() {
            *x = x.exp();
        }
        self.push1(out, Op::Exp, v)
    }

    /// Elementwise `max(x, floor)`. Entries at or below the floor get zero
    /// gradient.
    pub fn clamp_min(&self, v: Value, floor: f64) -> Value {
        let mut out = self.data_clone(v);
        for x in out.data_mut() {
            if *x < floor {
                *x = floor;
            }
        }
        self.push1(out, Op::ClampMin { floor }, v)
    }

    pub fn softmax(&self, v: Value, axis: Axis) -> Value {
        let mut out = self.data_clone(v);
        for_each_slice_mut(&mut out, axis, |slice| {
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in slice.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            for s in slice.iter_mut() {
                *s /= sum;
            }
        });
        self.push1(out, Op::Softmax { axis }, v)
    }

    pub fn log_softmax(&self, v: Value, axis: Axis) -> Value {
        let mut out = self.data_clone(v);
        for_each_slice_mut(&mut out, axis, |slice| {
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = slice.iter().map(|s| (s - m).exp()).sum::<f64>().ln() + m;
            for s in slice.iter_mut() {
                *s -= lse;
            }
        });
        self.push1(out, Op::LogSoftmax { axis }, v)
    }

    /// Row-wise max across columns (the point axis), returning m x 1 with
    /// argmax retained. Ties break to the lowest column index.
    pub fn max_cols(&self, v: Value) -> Value {
        let x = self.data(v);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, 1);
        let mut argmax = vec![0usize; r];
        for i in 0..r {
            let mut best = x.at(i, 0);
            let mut at = 0;
            for j in 1..c {
                let xv = x.at(i, j);
                if xv > best {
                    best = xv;
                    at = j;
                }
            }
            out.set(i, 0, best);
            argmax[i] = at;
        }
        drop(x);
        self.push1(out, Op::MaxCols { argmax }, v)
    }

    /// Row-wise mean across columns, m x 1.
    pub fn mean_cols(&self, v: Value) -> Value {
        let x = self.data(v);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += x.at(i, j);
            }
            out.set(i, 0, s / c as f64);
        }
        drop(x);
        self.push1(out, Op::MeanCols, v)
    }

    /// Row-wise population variance across columns, m x 1.
    pub fn var_cols(&self, v: Value) -> Value {
        let x = self.data(v);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, 1);
        let mut means = vec![0.0; r];
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += x.at(i, j);
            }
            let mu = s / c as f64;
            means[i] = mu;
            let mut v2 = 0.0;
            for j in 0..c {
                let d = x.at(i, j) - mu;
                v2 += d * d;
            }
            out.set(i, 0, v2 / c as f64);
        }
        drop(x);
        self.push1(out, Op::VarCols { means }, v)
    }

    /// Column groups pooled by max: output column g is the row-wise max over
    /// the input columns listed in `groups[g]`. Ties break to the earliest
    /// listed column.
    pub fn group_max_cols(&self, v: Value, groups: &[Vec<usize>]) -> Result<Value> {
        let x = self.data(v);
        let (r, c) = x.shape();
        for g in groups {
            if g.is_empty() {
                return Err(GraphError::InvalidArg {
                    op: "group_max_cols",
                    msg: "empty group".into(),
                });
            }
            if g.iter().any(|&j| j >= c) {
                return Err(GraphError::InvalidArg {
                    op: "group_max_cols",
                    msg: format!("column index out of range (cols={c})"),
                });
            }
        }
        let ng = groups.len();
        let mut out = Tensor::zeros(r, ng);
        let mut argmax = vec![0usize; r * ng];
        for i in 0..r {
            for (gi, g) in groups.iter().enumerate() {
                let mut best = x.at(i, g[0]);
                let mut at = g[0];
                for &j in &g[1..] {
                    let xv = x.at(i, j);
                    if xv > best {
                        best = xv;
                        at = j;
                    }
                }
                out.set(i, gi, best);
                argmax[i * ng + gi] = at;
            }
        }
        drop(x);
        Ok(self.push1(out, Op::GroupMaxCols { argmax }, v))
    }

    /// Mean cross-entropy of column logits against integer labels.
    /// `logits` is classes x batch; `labels[b]` indexes the true row.
    pub fn cross_entropy(&self, logits: Value, labels: &[usize]) -> Result<Value> {
        let (classes, batch) = self.shape(logits);
        if labels.len() != batch {
            return Err(GraphError::ShapeMismatch {
                op: "cross_entropy",
                lhs: (classes, batch),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(GraphError::InvalidArg {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut log_probs = self.data_clone(logits);
        for_each_slice_mut(&mut log_probs, Axis::Rows, |slice| {
            let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = slice.iter().map(|s| (s - m).exp()).sum::<f64>().ln() + m;
            for s in slice.iter_mut() {
                *s -= lse;
            }
        });
        let mut loss = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            loss -= log_probs.at(l, b);
        }
        loss /= batch as f64;
        let op = Op::CrossEntropy {
            labels: labels.to_vec(),
            log_probs,
        };
        Ok(self.push1(Tensor::scalar(loss), op, logits))
    }

    /// Horizontal concatenation; all inputs share the row count.
    pub fn concat_cols(&self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(GraphError::InvalidArg {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let (rows, c0) = self.shape(parts[0]);
        let mut widths = vec![c0];
        let mut total = c0;
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, c0),
                    rhs: (r, c),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut out = Tensor::zeros(rows, total);
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for &p in parts {
                let t = &nodes[p.id as usize].data;
                for r in 0..rows {
                    for c in 0..t.cols() {
                        out.set(r, off + c, t.at(r, c));
                    }
                }
                off += t.cols();
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push_raw(out, Op::ConcatCols { widths }, ids, needs))
    }

    pub fn slice_cols(&self, v: Value, start: usize, len: usize) -> Result<Value> {
        let (_, c) = self.shape(v);
        if start + len > c {
            return Err(GraphError::InvalidArg {
                op: "slice_cols",
                msg: format!("range {start}..{} exceeds {c} columns", start + len),
            });
        }
        let out = self.data(v).slice_cols(start, len);
        Ok(self.push1(out, Op::SliceCols { start }, v))
    }

    /// Mean over all entries, 1 x 1.
    pub fn mean_all(&self, v: Value) -> Value {
        let x = self.data(v);
        let n = x.len() as f64;
        let s: f64 = x.iter().sum();
        drop(x);
        self.push1(Tensor::scalar(s / n), Op::MeanAll, v)
    }

    /// Identity forward; contributes zero adjoint to its argument.
    pub fn stop_grad(&self, v: Value) -> Value {
        let out = self.data_clone(v);
        self.push_raw(out, Op::StopGrad, vec![v.id], false)
    }

    /// Internal hook for fused stochastic ops (see `stoch`): forward scalar
    /// plus a precomputed gradient w.r.t. the single parent.
    pub(crate) fn push_fused(&self, data: Tensor, grad_wrt_parent: Tensor, parent: Value) -> Value {
        self.push1(data, Op::Fused { grad_wrt_parent }, parent)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that needs one; each node is visited exactly once.
    pub fn backward(&self, loss: Value) -> Result<()> {
        self.check_value(loss);
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(GraphError::NonScalarBackward { shape });
        }
        let mut nodes = self.nodes.borrow_mut();
        let last = loss.id as usize;
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[last].grad = Some(Tensor::scalar(1.0));

        for i in (0..=last).rev() {
            if nodes[i].grad.is_none() {
                continue;
            }
            // Parents always precede children in the arena.
            let (front, back) = nodes.split_at_mut(i);
            let node = &back[0];
            let grad = node.grad.as_ref().unwrap();
            backprop_one(&node.op, &node.data, grad, &node.parents, front);
        }
        Ok(())
    }

    fn needs_grad(&self, v: Value) -> bool {
        self.check_value(v);
        self.nodes.borrow()[v.id as usize].needs_grad
    }

    fn check_value(&self, v: Value) {
        assert_eq!(v.graph, self.id, "value belongs to a different graph");
    }

    fn zip(
        &self,
        op_name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Value> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.data_clone(a);
        {
            let nodes = self.nodes.borrow();
            let bd = &nodes[b.id as usize].data;
            for (x, y) in out.data_mut().iter_mut().zip(bd.iter()) {
                *x = f(*x, *y);
            }
        }
        Ok(self.push2(out, op, a, b))
    }

    fn push1(&self, data: Tensor, op: Op, p: Value) -> Value {
        let needs = self.needs_grad(p);
        self.push_raw(data, op, vec![p.id], needs)
    }

    fn push2(&self, data: Tensor, op: Op, a: Value, b: Value) -> Value {
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push_raw(data, op, vec![a.id, b.id], needs)
    }

    fn push_raw(&self, data: Tensor, op: Op, parents: Vec<u32>, needs_grad: bool) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node {
            data,
            grad: None,
            op,
            parents,
            needs_grad,
        });
        Value { graph: self.id, id }
    }
}

/// Apply `f` to every slice along `axis` (rows of the matrix for
/// `Axis::Cols`, columns for `Axis::Rows`).
fn for_each_slice_mut(t: &mut Tensor, axis: Axis, mut f: impl FnMut(&mut [f64])) {
    let (rows, cols) = t.shape();
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                let d = t.data_mut();
                f(&mut d[r * cols..(r + 1) * cols]);
            }
        }
        Axis::Rows => {
            let mut buf = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    buf[r] = t.at(r, c);
                }
                f(&mut buf);
                for r in 0..rows {
                    t.set(r, c, buf[r]);
                }
            }
        }
    }
}

fn wants(front: &[Node], pid: u32) -> bool {
    front[pid as usize].needs_grad
}

fn parent_data(front: &[Node], pid: u32) -> Tensor {
    front[pid as usize].data.clone()
}

fn acc(front: &mut [Node], pid: u32, f: impl FnOnce(&mut Tensor)) {
    let p = &mut front[pid as usize];
    if !p.needs_grad {
        return;
    }
    let (r, c) = p.data.shape();
    let g = p.grad.get_or_insert_with(|| Tensor::zeros(r, c));
    f(g);
}

/// Route one node's adjoint to its parents.
fn backprop_one(op: &Op, y: &Tensor, grad: &Tensor, parents: &[u32], front: &mut [Node]) {
    match op {
        Op::Leaf | Op::StopGrad => {}
        Op::MatMul => {
            let (a, b) = (parents[0], parents[1]);
            if wants(front, a) {
                let bd = parent_data(front, b);
                acc(front, a, |pg| {
                    gemm(1.0, grad, Trans::No, &bd, Trans::Yes, 1.0, pg);
                });
            }
            if wants(front, b) {
                let ad = parent_data(front, a);
                acc(front, b, |pg| {
                    gemm(1.0, &ad, Trans::Yes, grad, Trans::No, 1.0, pg);
                });
            }
        }
        Op::MatMulNT => {
            // c = a*b^T: da += g*b, db += g^T*a
            let (a, b) = (parents[0], parents[1]);
            if wants(front, a) {
                let bd = parent_data(front, b);
                acc(front, a, |pg| {
                    gemm(1.0, grad, Trans::No, &bd, Trans::No, 1.0, pg);
                });
            }
            if wants(front, b) {
                let ad = parent_data(front, a);
                acc(front, b, |pg| {
                    gemm(1.0, grad, Trans::Yes, &ad, Trans::No, 1.0, pg);
                });
            }
        }
        Op::AddBias => {
            acc(front, parents[0], |pg| {
                for (g, x) in grad.iter().zip(pg.data_mut()) {
                    *x += g;
                }
            });
            let (rows, cols) = grad.shape();
            acc(front, parents[1], |pg| {
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += grad.at(r, c);
                    }
                    let v = pg.at(r, 0) + s;
                    pg.set(r, 0, v);
                }
            });
        }
        Op::Add => {
            for &p in &parents[..2] {
                acc(front, p, |pg| {
                    for (g, x) in grad.iter().zip(pg.data_mut()) {
                        *x += g;
                    }
                });
            }
        }
        Op::Sub => {
            acc(front, parents[0], |pg| {
                for (g, x) in grad.iter().zip(pg.data_mut()) {
                    *x += g;
                }
            });
            acc(front, parents[1], |pg| {
                for (g, x) in grad.iter().zip(pg.data_mut()) {
                    *x -= g;
                }
            });
        }
        Op::Mul => {
            let (a, b) = (parents[0], parents[1]);
            if wants(front, a) {
                let bd = parent_data(front, b);
                acc(front, a, |pg| {
                    for ((g, bv), x) in grad.iter().zip(bd.iter()).zip(pg.data_mut()) {
                        *x += g * bv;
                    }
                });
            }
            if wants(front, b) {
                let ad = parent_data(front, a);
                acc(front, b, |pg| {
                    for ((g, av), x) in grad.iter().zip(ad.iter()).zip(pg.data_mut()) {
                        *x += g * av;
                    }
                });
            }
        }
        Op::Div => {
            let (a, b) = (parents[0], parents[1]);
            let bd = parent_data(front, b);
            acc(front, a, |pg| {
                for ((g, bv), x) in grad.iter().zip(bd.iter()).zip(pg.data_mut()) {
                    *x += g / bv;
                }
            });
            acc(front, b, |pg| {
                for (((g, yv), bv), x) in grad.iter().zip(y.iter()).zip(bd.iter()).zip(pg.data_mut()) {
                    *x -= g * yv / bv;
                }
            });
        }
        Op::ScaleShift { a } => {
            let a = *a;
            acc(front, parents[0], |pg| {
                for (g, x) in grad.iter().zip(pg.data_mut()) {
                    *x += a * g;
                }
            });
        }
        Op::Elu => {
            // y > 0 iff x > 0, and for x <= 0 the slope is y + 1.
            acc(front, parents[0], |pg| {
                for ((g, yv), x) in grad.iter().zip(y.iter()).zip(pg.data_mut()) {
                    let d = if *yv > 0.0 { 1.0 } else { yv + 1.0 };
                    *x += g * d;
                }
            });
        }
        Op::Sigmoid => {
            acc(front, parents[0], |pg| {
                for ((g, yv), x) in grad.iter().zip(y.iter()).zip(pg.data_mut()) {
                    *x += g * yv * (1.0 - yv);
                }
            });
        }
        Op::Ln => {
            let xd = parent_data(front, parents[0]);
            acc(front, parents[0], |pg| {
                for ((g, x0), x) in grad.iter().zip(xd.iter()).zip(pg.data_mut()) {
                    *x += g / x0;
                }
            });
        }
        Op::Exp => {
            acc(front, parents[0], |pg| {
                for ((g, yv), x) in grad.iter().zip(y.iter()).zip(pg.data_mut()) {
                    *x += g * yv;
                }
            });
        }
        Op::ClampMin { floor } => {
            let floor = *floor;
            acc(front, parents[0], |pg| {
                for ((g, yv), x) in grad.iter().zip(y.iter()).zip(pg.data_mut()) {
                    if *yv > floor {
                        *x += g;
                    }
                }
            });
        }
        Op::Softmax { axis } => {
            let axis = *axis;
            acc(front, parents[0], |pg| {
                accumulate_softmax_grad(y, grad, axis, pg);
            });
        }
        Op::LogSoftmax { axis } => {
            let axis = *axis;
            acc(front, parents[0], |pg| {
                accumulate_log_softmax_grad(y, grad, axis, pg);
            });
        }
        Op::MaxCols { argmax } => {
            acc(front, parents[0], |pg| {
                for (r, &c) in argmax.iter().enumerate() {
                    let v = pg.at(r, c) + grad.at(r, 0);
                    pg.set(r, c, v);
                }
            });
        }
        Op::MeanCols => {
            acc(front, parents[0], |pg| {
                let n = pg.cols() as f64;
                for r in 0..pg.rows() {
                    let g = grad.at(r, 0) / n;
                    for c in 0..pg.cols() {
                        let v = pg.at(r, c) + g;
                        pg.set(r, c, v);
                    }
                }
            });
        }
        Op::VarCols { means } => {
            let xd = parent_data(front, parents[0]);
            acc(front, parents[0], |pg| {
                let n = xd.cols() as f64;
                for r in 0..xd.rows() {
                    let g = grad.at(r, 0) * 2.0 / n;
                    for c in 0..xd.cols() {
                        let v = pg.at(r, c) + g * (xd.at(r, c) - means[r]);
                        pg.set(r, c, v);
                    }
                }
            });
        }
        Op::GroupMaxCols { argmax } => {
            let ng = y.cols();
            let rows = y.rows();
            acc(front, parents[0], |pg| {
                for r in 0..rows {
                    for gi in 0..ng {
                        let src = argmax[r * ng + gi];
                        let v = pg.at(r, src) + grad.at(r, gi);
                        pg.set(r, src, v);
                    }
                }
            });
        }
        Op::CrossEntropy { labels, log_probs } => {
            let g = grad.item();
            let batch = labels.len() as f64;
            acc(front, parents[0], |pg| {
                for (b, &label) in labels.iter().enumerate() {
                    for cls in 0..log_probs.rows() {
                        let p = log_probs.at(cls, b).exp();
                        let onehot = if cls == label { 1.0 } else { 0.0 };
                        let v = pg.at(cls, b) + g * (p - onehot) / batch;
                        pg.set(cls, b, v);
                    }
                }
            });
        }
        Op::ConcatCols { widths } => {
            let mut off = 0;
            for (slot, &w) in widths.iter().enumerate() {
                let start = off;
                acc(front, parents[slot], |pg| {
                    for r in 0..pg.rows() {
                        for c in 0..w {
                            let v = pg.at(r, c) + grad.at(r, start + c);
                            pg.set(r, c, v);
                        }
                    }
                });
                off += w;
            }
        }
        Op::SliceCols { start } => {
            let start = *start;
            acc(front, parents[0], |pg| {
                for r in 0..grad.rows() {
                    for c in 0..grad.cols() {
                        let v = pg.at(r, start + c) + grad.at(r, c);
                        pg.set(r, start + c, v);
                    }
                }
            });
        }
        Op::MeanAll => {
            let g = grad.item();
            acc(front, parents[0], |pg| {
                let n = pg.len() as f64;
                for x in pg.data_mut() {
                    *x += g / n;
                }
            });
        }
        Op::Fused { grad_wrt_parent } => {
            let g = grad.item();
            acc(front, parents[0], |pg| {
                for (s, x) in grad_wrt_parent.iter().zip(pg.data_mut()) {
                    *x += g * s;
                }
            });
        }
    }
}

fn accumulate_softmax_grad(y: &Tensor, grad: &Tensor, axis: Axis, pg: &mut Tensor) {
    let (rows, cols) = y.shape();
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += grad.at(r, c) * y.at(r, c);
                }
                for c in 0..cols {
                    let v = pg.at(r, c) + y.at(r, c) * (grad.at(r, c) - dot);
                    pg.set(r, c, v);
                }
            }
        }
        Axis::Rows => {
            for c in 0..cols {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += grad.at(r, c) * y.at(r, c);
                }
                for r in 0..rows {
                    let v = pg.at(r, c) + y.at(r, c) * (grad.at(r, c) - dot);
                    pg.set(r, c, v);
                }
            }
        }
    }
}

fn accumulate_log_softmax_grad(y: &Tensor, grad: &Tensor, axis: Axis, pg: &mut Tensor) {
    let (rows, cols) = y.shape();
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                let gsum: f64 = (0..cols).map(|c| grad.at(r, c)).sum();
                for c in 0..cols {
                    let v = pg.at(r, c) + grad.at(r, c) - y.at(r, c).exp() * gsum;
                    pg.set(r, c, v);
                }
            }
        }
        Axis::Rows => {
            for c in 0..cols {
                let gsum: f64 = (0..rows).map(|r| grad.at(r, c)).sum();
                for r in 0..rows {
                    let v = pg.at(r, c) + grad.at(r, c) - y.at(r, c).exp() * gsum;
                    pg.set(r, c, v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_gradient_at_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert!((g.grad(x).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, Axis::Cols);
        for v in g.data(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_cols_values_and_ties() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 3, vec![1.0, 5.0, 2.0, 4.0, 0.0, 4.0]));
        let y = g.max_cols(x);
        assert_eq!(g.data(y).data(), &[5.0, 4.0]);
        // tie in row 1 between cols 0 and 2 resolves to the lowest index
        assert_eq!(g.argmax_of(y).unwrap(), vec![1, 0]);
    }

    #[test]
    fn cross_entropy_uniform_case() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(2, 1, vec![0.0, 0.0]));
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert!((g.item(ce) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_adjoints() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let through = g.mul(x, x).unwrap();
        let blocked = g.stop_grad(through);
        // loss = x^2 + sg(x^2): gradient must come from the first term only.
        let loss = g.add(through, blocked).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(x).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn multiplying_by_a_constant_still_routes_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(4.0));
        let c = g.constant(Tensor::scalar(2.5));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x).item() - 2.5).abs() < 1e-12);
        assert!(g.try_grad(c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates_once_per_use() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let ab = g.mul(a, b).unwrap();
        let sum = g.add(ab, ab).unwrap(); // 2ab
        let loss = g.mean_all(sum);
        g.backward(loss).unwrap();
        assert!((g.grad(a).item() - 6.0).abs() < 1e-12);
        assert!((g.grad(b).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn square_via_self_multiply() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        let y = g.elu(x);
        match g.backward(y) {
            Err(GraphError::NonScalarBackward { shape }) => assert_eq!(shape, (2, 2)),
            other => panic!("expected NonScalarBackward, got {other:?}"),
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(4, 2));
        match g.matmul(a, b) {
            Err(GraphError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (4, 2));
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let g = Graph::new();
            let mut rng = crate::rng::Rng::new(77);
            let a = g.leaf(Tensor::random_uniform(8, 8, -1.0, 1.0, &mut rng));
            let b = g.leaf(Tensor::random_uniform(8, 8, -1.0, 1.0, &mut rng));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c, Axis::Cols);
            let l = g.mean_all(s);
            g.backward(l).unwrap();
            (g.data_clone(c), g.grad(a))
        };
        let (c1, g1) = run();
        let (c2, g2) = run();
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in g1.iter().zip(g2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
