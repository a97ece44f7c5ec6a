//! Reverse-mode differentiation on a dynamic tape.
//!
//! Every primitive records itself as a [`Node`] holding its forward value and
//! the indices of its inputs; creation order is topological by construction.
//! [`Tape::backward`] walks the record in reverse, accumulating adjoints.
//!
//! A tape lives for one forward/backward pass and is rebuilt per scene, since
//! pedestrian and group counts change from window to window. Tapes are
//! single-threaded; run one per thread.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::numerics::Array;

/// Handle to a value recorded on a tape. Cheap to copy; tied to the tape's
/// lifetime so handles cannot outlive the record they index into.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

struct Node {
    op: Op,
    value: Array,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    Scale(usize, f64),
    AddConst(usize),
    StopGradient(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis0(usize),
    MeanTime(usize),
    TileRows(usize),
    BroadcastScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Matmul(usize, usize),
    TemporalConv { x: usize, w: usize, b: usize },
    GraphConv { x: usize, w: usize, adj: Array },
    TimeLinear { x: usize, w: usize, b: usize },
    SegmentMean { x: usize, part: GroupPartition },
    SegmentGather { x: usize, part: GroupPartition },
    PairwiseL2(usize),
    ConcatChannels(Vec<usize>),
    SliceChannels { x: usize, from: usize, to: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::LeakyRelu(x, _)
            | Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::StopGradient(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::SumAxis0(x)
            | Op::MeanTime(x)
            | Op::TileRows(x)
            | Op::BroadcastScalar(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::PairwiseL2(x)
            | Op::SegmentMean { x, .. }
            | Op::SegmentGather { x, .. }
            | Op::SliceChannels { x, .. } => vec![*x],
            Op::TemporalConv { x, w, b } | Op::TimeLinear { x, w, b } => vec![*x, *w, *b],
            Op::GraphConv { x, w, .. } => vec![*x, *w],
            Op::ConcatChannels(parts) => parts.clone(),
        }
    }
}

/// The operation record. Interior mutability lets `Var` methods push nodes
/// through a shared reference, which keeps call sites free of `&mut` plumbing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Values emitted by stop_gradient nodes, in creation order.
    sg_values: RefCell<Vec<Array>>,
    /// When set, the i-th stop_gradient node emits `pins[i]` instead of its
    /// input. Used by the gradient checker to hold frozen paths at their
    /// baseline while finite differences perturb the leaves.
    pins: Option<Vec<Array>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            sg_values: RefCell::new(Vec::new()),
            pins: None,
        }
    }

    /// A tape whose stop_gradient nodes replay the given values.
    pub fn with_pins(pins: Vec<Array>) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            sg_values: RefCell::new(Vec::new()),
            pins: Some(pins),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input or parameter value.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(Op::Leaf, value)
            .expect("leaf values are caller-provided and finite")
    }

    /// Values produced by stop_gradient nodes so far, in creation order.
    pub fn stop_gradient_values(&self) -> Vec<Array> {
        self.sg_values.borrow().clone()
    }

    fn push(&self, op: Op, value: Array) -> Result<Var<'_>> {
        let id = self.nodes.borrow().len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id });
        }
        self.nodes.borrow_mut().push(Node { op, value });
        Ok(Var { tape: self, id })
    }

    fn value_of(&self, id: usize) -> Array {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Mark every node with a backward path to `out` that does not cross a
    /// stop_gradient boundary.
    fn active_set(&self, out: usize) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut active = vec![false; nodes.len()];
        let mut stack = vec![out];
        while let Some(id) = stack.pop() {
            if active[id] {
                continue;
            }
            active[id] = true;
            if matches!(nodes[id].op, Op::StopGradient(_)) {
                continue; // adjoint is zero past this point
            }
            stack.extend(nodes[id].op.inputs());
        }
        active
    }

    /// Reverse sweep from a scalar output. Returns per-node adjoints.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(out.tape, self),
            "backward called with a Var from another tape"
        );
        let nodes = self.nodes.borrow();
        if nodes[out.id].value.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward (scalar output required)",
                lhs: nodes[out.id].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let active = self.active_set(out.id);
        let mut adj: Vec<Option<Array>> = vec![None; nodes.len()];
        adj[out.id] = Some(Array::scalar(1.0));

        for id in (0..=out.id).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            backward_op(&node.op, &node.value, &g, &nodes, &mut adj);
            adj[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adj, shapes, active })
    }
}

/// Adjoints produced by a backward sweep.
pub struct Gradients {
    adj: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    active: Vec<bool>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when no gradient flowed to it.
    pub fn grad(&self, v: Var<'_>) -> Array {
        self.adj[v.id]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.id]))
    }

    /// Whether `v` can influence the output through a differentiable path.
    /// Leaves feeding the output only through stop_gradient are inactive.
    pub fn is_active(&self, v: Var<'_>) -> bool {
        self.active[v.id]
    }
}

fn accumulate(adj: &mut [Option<Array>], id: usize, delta: Array) {
    match &mut adj[id] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        None => adj[id] = Some(delta),
    }
}

fn backward_op(op: &Op, value: &Array, g: &Array, nodes: &[Node], adj: &mut [Option<Array>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, map1(g, |v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(adj, *a, zip2(g, &nodes[*b].value, |g, b| g * b));
            accumulate(adj, *b, zip2(g, &nodes[*a].value, |g, a| g * a));
        }
        Op::Div(a, b) => {
            let bv = &nodes[*b].value;
            accumulate(adj, *a, zip2(g, bv, |g, b| g / b));
            let av = &nodes[*a].value;
            let mut db = g.clone();
            for ((d, a), b) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *d = -*d * a / (b * b);
            }
            accumulate(adj, *b, db);
        }
        Op::Neg(x) => accumulate(adj, *x, map1(g, |v| -v)),
        Op::Exp(x) => accumulate(adj, *x, zip2(g, value, |g, y| g * y)),
        Op::Ln(x) => accumulate(adj, *x, zip2(g, &nodes[*x].value, |g, v| g / v)),
        Op::Tanh(x) => accumulate(adj, *x, zip2(g, value, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(x) => accumulate(adj, *x, zip2(g, value, |g, y| g * y * (1.0 - y))),
        Op::Softplus(x) => {
            accumulate(adj, *x, zip2(g, &nodes[*x].value, |g, v| g * sigmoid(v)));
        }
        Op::LeakyRelu(x, slope) => {
            let s = *slope;
            accumulate(
                adj,
                *x,
                zip2(g, &nodes[*x].value, |g, v| if v >= 0.0 { g } else { g * s }),
            );
        }
        Op::Scale(x, c) => accumulate(adj, *x, map1(g, |v| v * c)),
        Op::AddConst(x) => accumulate(adj, *x, g.clone()),
        Op::StopGradient(_) => {}
        Op::SumAll(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            accumulate(adj, *x, Array::full(&shape, g.item()));
        }
        Op::MeanAll(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            let n = nodes[*x].value.numel() as f64;
            accumulate(adj, *x, Array::full(&shape, g.item() / n));
        }
        Op::SumAxis0(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            let mut dx = Array::zeros(&shape);
            for i in 0..m {
                for j in 0..n {
                    dx.set2(i, j, g.data()[j]);
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::MeanTime(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            let (n, t, c) = (shape[0], shape[1], shape[2]);
            let mut dx = Array::zeros(&shape);
            for i in 0..n {
                for s in 0..t {
                    for k in 0..c {
                        dx.set3(i, s, k, g.at2(i, k) / t as f64);
                    }
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::TileRows(x) => {
            let n = nodes[*x].value.numel();
            let rows = value.shape()[0];
            let mut dx = Array::zeros(&[n]);
            for i in 0..rows {
                for j in 0..n {
                    dx.data_mut()[j] += g.at2(i, j);
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::BroadcastScalar(x) => {
            accumulate(adj, *x, Array::scalar(g.data().iter().sum()));
        }
        Op::Transpose(x) => {
            let (m, n) = (value.shape()[0], value.shape()[1]);
            let mut dx = Array::zeros(&[n, m]);
            for i in 0..m {
                for j in 0..n {
                    dx.set2(j, i, g.at2(i, j));
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::Reshape(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            let dx = Array::new(shape, g.data().to_vec()).expect("reshape preserves numel");
            accumulate(adj, *x, dx);
        }
        Op::Matmul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            // dA = g · Bᵀ, dB = Aᵀ · g
            let mut da = Array::zeros(&[m, k]);
            for i in 0..m {
                for j in 0..n {
                    let gij = g.at2(i, j);
                    for p in 0..k {
                        da.data_mut()[i * k + p] += gij * bv.at2(p, j);
                    }
                }
            }
            accumulate(adj, *a, da);
            let mut db = Array::zeros(&[k, n]);
            for i in 0..m {
                for p in 0..k {
                    let aip = av.at2(i, p);
                    for j in 0..n {
                        db.data_mut()[p * n + j] += aip * g.at2(i, j);
                    }
                }
            }
            accumulate(adj, *b, db);
        }
        Op::TemporalConv { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (n, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
            let pad = (k - 1) / 2;
            let mut dx = Array::zeros(&[n, t, c]);
            let mut dw = Array::zeros(&[k, c, c_out]);
            let mut db = Array::zeros(&[c_out]);
            for i in 0..n {
                for to in 0..t {
                    for co in 0..c_out {
                        let go = g.at3(i, to, co);
                        db.data_mut()[co] += go;
                        for dt in 0..k {
                            let ti = to as isize + dt as isize - pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let ti = ti as usize;
                            for ci in 0..c {
                                dx.data_mut()[(i * t + ti) * c + ci] +=
                                    go * wv.at3(dt, ci, co);
                                dw.data_mut()[(dt * c + ci) * c_out + co] +=
                                    go * xv.at3(i, ti, ci);
                            }
                        }
                    }
                }
            }
            accumulate(adj, *x, dx);
            accumulate(adj, *w, dw);
            accumulate(adj, *b, db);
        }
        Op::GraphConv { x, w, adj: a } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (n, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let c_out = wv.shape()[1];
            let mut dx = Array::zeros(&[n, t, c]);
            let mut dw = Array::zeros(&[c, c_out]);
            for s in 0..t {
                // mixed = A_s · x_s (recomputed; cheaper than saving it)
                let mut mixed = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..n {
                        let aij = a.at3(s, i, j);
                        if aij == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            mixed[i * c + ci] += aij * xv.at3(j, s, ci);
                        }
                    }
                }
                // dW += mixedᵀ · g_s ; dmixed = g_s · Wᵀ ; dx_s = A_sᵀ · dmixed
                let mut dmixed = vec![0.0; n * c];
                for i in 0..n {
                    for co in 0..c_out {
                        let go = g.at3(i, s, co);
                        for ci in 0..c {
                            dw.data_mut()[ci * c_out + co] += mixed[i * c + ci] * go;
                            dmixed[i * c + ci] += go * wv.at2(ci, co);
                        }
                    }
                }
                for j in 0..n {
                    for i in 0..n {
                        let aij = a.at3(s, i, j);
                        if aij == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            dx.data_mut()[(j * t + s) * c + ci] += aij * dmixed[i * c + ci];
                        }
                    }
                }
            }
            accumulate(adj, *x, dx);
            accumulate(adj, *w, dw);
        }
        Op::TimeLinear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (n, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let t_out = wv.shape()[0];
            let mut dx = Array::zeros(&[n, t, c]);
            let mut dw = Array::zeros(&[t_out, t]);
            let mut db = Array::zeros(&[t_out]);
            for i in 0..n {
                for to in 0..t_out {
                    for ci in 0..c {
                        let go = g.at3(i, to, ci);
                        db.data_mut()[to] += go;
                        for ti in 0..t {
                            dx.data_mut()[(i * t + ti) * c + ci] += go * wv.at2(to, ti);
                            dw.data_mut()[to * t + ti] += go * xv.at3(i, ti, ci);
                        }
                    }
                }
            }
            accumulate(adj, *x, dx);
            accumulate(adj, *w, dw);
            accumulate(adj, *b, db);
        }
        Op::SegmentMean { x, part } => {
            let shape = nodes[*x].value.shape().to_vec();
            let f = shape[1];
            let mut dx = Array::zeros(&shape);
            for (k, group) in part.groups().iter().enumerate() {
                let scale = 1.0 / group.len() as f64;
                for &i in group {
                    for j in 0..f {
                        dx.data_mut()[i * f + j] += g.at2(k, j) * scale;
                    }
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::SegmentGather { x, part } => {
            let shape = nodes[*x].value.shape().to_vec();
            let f = shape[1];
            let mut dz = Array::zeros(&shape);
            for (k, group) in part.groups().iter().enumerate() {
                for &i in group {
                    for j in 0..f {
                        dz.data_mut()[k * f + j] += g.at2(i, j);
                    }
                }
            }
            accumulate(adj, *x, dz);
        }
        Op::PairwiseL2(x) => {
            let xv = &nodes[*x].value;
            let (n, f) = (xv.shape()[0], xv.shape()[1]);
            let mut dx = Array::zeros(&[n, f]);
            for i in 0..n {
                for j in 0..n {
                    let d = value.at2(i, j);
                    if d == 0.0 {
                        continue; // subgradient 0 at coincident rows
                    }
                    let gij = g.at2(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..f {
                        let diff = (xv.at2(i, p) - xv.at2(j, p)) / d;
                        dx.data_mut()[i * f + p] += gij * diff;
                        dx.data_mut()[j * f + p] -= gij * diff;
                    }
                }
            }
            accumulate(adj, *x, dx);
        }
        Op::ConcatChannels(parts) => {
            let (n, t, c_total) = (value.shape()[0], value.shape()[1], value.shape()[2]);
            let mut offset = 0;
            for &p in parts {
                let cp = nodes[p].value.shape()[2];
                let mut dp = Array::zeros(&[n, t, cp]);
                for i in 0..n {
                    for s in 0..t {
                        for k in 0..cp {
                            dp.set3(i, s, k, g.at3(i, s, offset + k));
                        }
                    }
                }
                accumulate(adj, p, dp);
                offset += cp;
                debug_assert!(offset <= c_total);
            }
        }
        Op::SliceChannels { x, from, to } => {
            let shape = nodes[*x].value.shape().to_vec();
            let (n, t) = (shape[0], shape[1]);
            let mut dx = Array::zeros(&shape);
            for i in 0..n {
                for s in 0..t {
                    for k in *from..*to {
                        dx.set3(i, s, k, g.at3(i, s, k - from));
                    }
                }
            }
            accumulate(adj, *x, dx);
        }
    }
}

fn map1(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::new(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip2(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(a.shape(), b.shape());
    Array::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("shape preserved")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn value(self) -> Array {
        self.tape.value_of(self.id)
    }

    /// The tape this value is recorded on, for registering further leaves.
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    fn same_shape(self, rhs: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return Err(Error::Dimension { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = map1(&self.tape.value_of(self.id), f);
        self.tape.push(op, v)
    }

    fn binary(self, rhs: Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        self.same_shape(rhs, name)?;
        let v = zip2(&self.tape.value_of(self.id), &self.tape.value_of(rhs.id), f);
        self.tape.push(op, v)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), "mul", |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Div(self.id, rhs.id), "div", |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(Op::LeakyRelu(self.id, slope), |v| {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    /// Smooth leaky rectifier `slope·x + (1-slope)·softplus(x)`: matches the
    /// leaky ReLU asymptotes but is C-infinity, so finite-difference
    /// gradient checks stay valid at near-zero pre-activations.
    pub fn smooth_leaky(self, slope: f64) -> Result<Var<'t>> {
        self.scale(slope)?
            .add(self.softplus()?.scale(1.0 - slope)?)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddConst(self.id), |v| v + c)
    }

    /// Forward identity; backward adjoint is exactly zero.
    pub fn stop_gradient(self) -> Result<Var<'t>> {
        let input = self.tape.value_of(self.id);
        let idx = self.tape.sg_values.borrow().len();
        let value = match &self.tape.pins {
            Some(pins) => {
                let pinned = pins.get(idx).ok_or_else(|| {
                    Error::Config(
                        "stop_gradient structure changed between pinned evaluations".into(),
                    )
                })?;
                if pinned.shape() != input.shape() {
                    return Err(Error::Dimension {
                        op: "stop_gradient pin",
                        lhs: pinned.shape().to_vec(),
                        rhs: input.shape().to_vec(),
                    });
                }
                pinned.clone()
            }
            None => input,
        };
        self.tape.sg_values.borrow_mut().push(value.clone());
        self.tape.push(Op::StopGradient(self.id), value)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let v = self.value();
        self.tape
            .push(Op::SumAll(self.id), Array::scalar(v.data().iter().sum()))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let v = self.value();
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(Op::MeanAll(self.id), Array::scalar(mean))
    }

    /// Column sums of a 2-D array: `M×N -> [N]`.
    pub fn sum_axis0(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "sum_axis0 (2-D required)",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Array::zeros(&[n]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j] += v.at2(i, j);
            }
        }
        self.tape.push(Op::SumAxis0(self.id), out)
    }

    /// Mean over the time axis of an `N×T×C` array, yielding `N×C`.
    pub fn mean_time(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "mean_time (3-D required)",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, t, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Array::zeros(&[n, c]);
        for i in 0..n {
            for s in 0..t {
                for k in 0..c {
                    out.data_mut()[i * c + k] += v.at3(i, s, k) / t as f64;
                }
            }
        }
        self.tape.push(Op::MeanTime(self.id), out)
    }

    /// Repeat a 1-D `[N]` vector into `rows×N`.
    pub fn tile_rows(self, rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(Error::Dimension {
                op: "tile_rows (1-D required)",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = v.numel();
        let mut out = Array::zeros(&[rows, n]);
        for i in 0..rows {
            for j in 0..n {
                out.set2(i, j, v.data()[j]);
            }
        }
        self.tape.push(Op::TileRows(self.id), out)
    }

    /// Broadcast a scalar `[1]` to an arbitrary shape.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_to (scalar required)",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.tape
            .push(Op::BroadcastScalar(self.id), Array::full(shape, v.item()))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "transpose (2-D required)",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Array::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, v.at2(i, j));
            }
        }
        self.tape.push(Op::Transpose(self.id), out)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Array::new(shape.to_vec(), v.data().to_vec()).expect("checked numel");
        self.tape.push(Op::Reshape(self.id), out)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Array::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let aip = a.at2(i, p);
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data_mut()[i * n + j] += aip * b.at2(p, j);
                }
            }
        }
        self.tape.push(Op::Matmul(self.id, rhs.id), out)
    }

    /// 1-D convolution along the time axis of `N×T×C`, zero-padded so the
    /// output length stays `T`. Kernel is `k×C×C'` with odd `k`, bias `[C']`.
    pub fn temporal_conv(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        if x.shape().len() != 3 || wv.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "temporal_conv",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal_conv kernel length must be odd, got {k}"
            )));
        }
        if wv.shape()[1] != c || bv.shape() != [c_out] {
            return Err(Error::Dimension {
                op: "temporal_conv",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let pad = (k - 1) / 2;
        let mut out = Array::zeros(&[n, t, c_out]);
        for i in 0..n {
            for to in 0..t {
                for co in 0..c_out {
                    let mut acc = bv.data()[co];
                    for dt in 0..k {
                        let ti = to as isize + dt as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for ci in 0..c {
                            acc += x.at3(i, ti as usize, ci) * wv.at3(dt, ci, co);
                        }
                    }
                    out.set3(i, to, co, acc);
                }
            }
        }
        self.tape.push(
            Op::TemporalConv {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            out,
        )
    }

    /// Graph convolution `out[:,t,:] = A_t · x[:,t,:] · W` with a constant
    /// per-timestep adjacency stack `T×N×N`. The adjacency carries no
    /// gradient; features and weights do.
    pub fn graph_conv(self, adj: &Array, w: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        if x.shape().len() != 3 || wv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "graph_conv",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if adj.shape() != [t, n, n] {
            return Err(Error::Dimension {
                op: "graph_conv adjacency",
                lhs: adj.shape().to_vec(),
                rhs: vec![t, n, n],
            });
        }
        if wv.shape()[0] != c {
            return Err(Error::Dimension {
                op: "graph_conv weights",
                lhs: vec![c],
                rhs: wv.shape().to_vec(),
            });
        }
        let c_out = wv.shape()[1];
        let mut out = Array::zeros(&[n, t, c_out]);
        for s in 0..t {
            for i in 0..n {
                let mut mixed = vec![0.0; c];
                for j in 0..n {
                    let aij = adj.at3(s, i, j);
                    if aij == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        mixed[ci] += aij * x.at3(j, s, ci);
                    }
                }
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += mixed[ci] * wv.at2(ci, co);
                    }
                    out.set3(i, s, co, acc);
                }
            }
        }
        self.tape.push(
            Op::GraphConv {
                x: self.id,
                w: w.id,
                adj: adj.clone(),
            },
            out,
        )
    }

    /// Dense map over the time axis: `out[n,t',c] = Σ_t w[t',t]·x[n,t,c] + b[t']`.
    /// Extrapolates the observation horizon to the prediction horizon.
    pub fn time_linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        if x.shape().len() != 3 || wv.shape().len() != 2 || wv.shape()[1] != x.shape()[1] {
            return Err(Error::Dimension {
                op: "time_linear",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t_out = wv.shape()[0];
        if bv.shape() != [t_out] {
            return Err(Error::Dimension {
                op: "time_linear bias",
                lhs: bv.shape().to_vec(),
                rhs: vec![t_out],
            });
        }
        let mut out = Array::zeros(&[n, t_out, c]);
        for i in 0..n {
            for to in 0..t_out {
                for ci in 0..c {
                    let mut acc = bv.data()[to];
                    for ti in 0..t {
                        acc += wv.at2(to, ti) * x.at3(i, ti, ci);
                    }
                    out.set3(i, to, ci, acc);
                }
            }
        }
        self.tape.push(
            Op::TimeLinear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            out,
        )
    }

    /// Per-group mean of rows: `N×F -> K×F`. The adjoint distributes
    /// `1/|G_k|` back to each member row.
    pub fn segment_mean(self, part: &GroupPartition) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "segment_mean (2-D required)",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if part.len() != n {
            return Err(Error::Partition(format!(
                "segment_mean: partition covers {} rows, array has {}",
                part.len(),
                n
            )));
        }
        let k = part.group_count();
        let mut out = Array::zeros(&[k, f]);
        for (gi, group) in part.groups().iter().enumerate() {
            let scale = 1.0 / group.len() as f64;
            for &i in group {
                for j in 0..f {
                    out.data_mut()[gi * f + j] += x.at2(i, j) * scale;
                }
            }
        }
        self.tape.push(
            Op::SegmentMean {
                x: self.id,
                part: part.clone(),
            },
            out,
        )
    }

    /// Duplicate group rows back to members: `K×F -> N×F`, row n takes the
    /// row of its group.
    pub fn segment_gather(self, part: &GroupPartition) -> Result<Var<'t>> {
        let z = self.value();
        if z.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "segment_gather (2-D required)",
                lhs: z.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (k, f) = (z.shape()[0], z.shape()[1]);
        if part.group_count() != k {
            return Err(Error::Partition(format!(
                "segment_gather: partition has {} groups, array has {} rows",
                part.group_count(),
                k
            )));
        }
        let n = part.len();
        let mut out = Array::zeros(&[n, f]);
        for i in 0..n {
            let gi = part.member_of(i);
            for j in 0..f {
                out.set2(i, j, z.at2(gi, j));
            }
        }
        self.tape.push(
            Op::SegmentGather {
                x: self.id,
                part: part.clone(),
            },
            out,
        )
    }

    /// Pairwise L2 distances between rows: `N×F -> N×N`, symmetric with a
    /// zero diagonal. Coincident rows get subgradient zero.
    pub fn pairwise_l2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "pairwise_l2 (2-D required)",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let mut out = Array::zeros(&[n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                let mut acc = 0.0;
                for p in 0..f {
                    let d = x.at2(i, p) - x.at2(j, p);
                    acc += d * d;
                }
                let d = acc.sqrt();
                out.set2(i, j, d);
                out.set2(j, i, d);
            }
        }
        self.tape.push(Op::PairwiseL2(self.id), out)
    }

    /// Concatenate 3-D arrays along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let first = parts[0].value();
        let (n, t) = (first.shape()[0], first.shape()[1]);
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 3 || s[0] != n || s[1] != t {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    lhs: first.shape().to_vec(),
                    rhs: s,
                });
            }
            c_total += s[2];
        }
        let mut out = Array::zeros(&[n, t, c_total]);
        let mut offset = 0;
        for p in parts {
            let v = p.value();
            let c = v.shape()[2];
            for i in 0..n {
                for s in 0..t {
                    for k in 0..c {
                        out.set3(i, s, offset + k, v.at3(i, s, k));
                    }
                }
            }
            offset += c;
        }
        tape.push(
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
            out,
        )
    }

    /// Slice channels `[from, to)` of a 3-D array.
    pub fn slice_channels(self, from: usize, to: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 3 || from >= to || to > x.shape()[2] {
            return Err(Error::Dimension {
                op: "slice_channels",
                lhs: x.shape().to_vec(),
                rhs: vec![from, to],
            });
        }
        let (n, t) = (x.shape()[0], x.shape()[1]);
        let c = to - from;
        let mut out = Array::zeros(&[n, t, c]);
        for i in 0..n {
            for s in 0..t {
                for k in 0..c {
                    out.set3(i, s, k, x.at3(i, s, from + k));
                }
            }
        }
        self.tape.push(
            Op::SliceChannels {
                x: self.id,
                from,
                to,
            },
            out,
        )
    }

    /// Scale each column of a 2-D array to sum 1.
    pub fn col_normalize(self) -> Result<Var<'t>> {
        let rows = {
            let s = self.shape();
            if s.len() != 2 {
                return Err(Error::Dimension {
                    op: "col_normalize (2-D required)",
                    lhs: s,
                    rhs: vec![],
                });
            }
            s[0]
        };
        let sums = self.sum_axis0()?;
        let tiled = sums.tile_rows(rows)?;
        self.div(tiled)
    }
}
