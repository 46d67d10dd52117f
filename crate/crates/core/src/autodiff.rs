//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one record to a [`Tape`]; parents always precede their
//! children, so the backward pass is a single reverse sweep. A tape accepts a
//! single backward pass.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Softplus,
    Silu,
    Exp,
    Neg,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
            Unary::Exp => "exp",
            Unary::Neg => "neg",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Silu => x * kernels::sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
        }
    }

    /// Derivative in terms of input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Silu => {
                let s = kernels::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Exp => y,
            Unary::Neg => -1.0,
        }
    }
}

/// The pointwise function menu exposed through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Softplus,
    Silu,
    Exp,
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which operand (if any) is a scalar broadcast against the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, Broadcast, usize, usize),
    AddRows(usize, usize),
    Scale(usize, f64),
    Unary(Unary, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    ReverseRows(usize),
    Reshape(usize),
    MeanAll(usize),
    SumAll(usize),
    CausalConv {
        x: usize,
        w: usize,
        b: usize,
    },
    DiscretizeA {
        delta: usize,
        a: usize,
    },
    DiscretizeB {
        delta: usize,
        b: usize,
    },
    Scan {
        u: usize,
        a_bar: usize,
        b_bar: usize,
        c: usize,
        d: usize,
        states: Vec<f64>,
    },
    ZohScan {
        u: usize,
        delta: usize,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        states: Vec<f64>,
        a_bar: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, _, a, b) | Op::AddRows(a, b) => vec![a, b],
            Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::SliceRows(x, _)
            | Op::ReverseRows(x)
            | Op::Reshape(x)
            | Op::MeanAll(x)
            | Op::SumAll(x) => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::CausalConv { x, w, b } => vec![x, w, b],
            Op::DiscretizeA { delta, a } => vec![delta, a],
            Op::DiscretizeB { delta, b } => vec![delta, b],
            Op::Scan {
                u,
                a_bar,
                b_bar,
                c,
                d,
                ..
            } => vec![u, a_bar, b_bar, c, d],
            Op::ZohScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                ..
            } => vec![u, delta, a, b, c, d],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Records a leaf. It participates in gradients iff `requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let needs_grad = tensor.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a non-differentiable input.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a differentiable input.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} ({v})")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Tensor::from_parts(shape, Arc::new(data)),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        debug_assert!(std::ptr::eq(self, loss.tape));
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// dLoss/dVar, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// dLoss/dVar with zeros for unreached variables.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.value().numel()])
    }

    /// The leaf's value with its gradient slot populated.
    pub fn leaf_with_grad(&self, var: Var<'_>) -> Tensor {
        let mut t = var.value();
        t.set_grad(self.get_or_zeros(var))
            .expect("gradient shape follows value shape");
        t
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            if let Some(da) = acc(grads, nodes, a) {
                kernels::matmul_grad_lhs(g, nodes[b].value.data(), m, k, n, da);
            }
            if let Some(db) = acc(grads, nodes, b) {
                kernels::matmul_grad_rhs(nodes[a].value.data(), g, m, k, n, db);
            }
        }
        &Op::Binary(kind, bc, a, b) => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let n = g.len();
            let a_at = |i: usize| if bc == Broadcast::Lhs { av[0] } else { av[i] };
            let b_at = |i: usize| if bc == Broadcast::Rhs { bv[0] } else { bv[i] };
            if let Some(da) = acc(grads, nodes, a) {
                for i in 0..n {
                    let d = match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * b_at(i),
                    };
                    if bc == Broadcast::Lhs {
                        da[0] += d;
                    } else {
                        da[i] += d;
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, b) {
                for i in 0..n {
                    let d = match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * a_at(i),
                    };
                    if bc == Broadcast::Rhs {
                        db[0] += d;
                    } else {
                        db[i] += d;
                    }
                }
            }
        }
        &Op::AddRows(x, v) => {
            let cols = nodes[v].value.numel();
            if let Some(dx) = acc(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(dv) = acc(grads, nodes, v) {
                for row in g.chunks(cols) {
                    dv.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
        }
        &Op::Scale(x, k) => {
            if let Some(dx) = acc(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += k * gi);
            }
        }
        &Op::Unary(f, x) => {
            let xv = nodes[x].value.data();
            let yv = node.value.data();
            if let Some(dx) = acc(grads, nodes, x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * f.derivative(xv[i], yv[i]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = nodes[*gamma].value.numel();
            let gv = nodes[*gamma].value.data();
            if let Some(dg) = acc(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *beta) {
                for gr in g.chunks(c) {
                    db.iter_mut().zip(gr).for_each(|(d, gi)| *d += gi);
                }
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, (gr, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[r * c + j] += rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        &Op::ConcatRows(a, b) => {
            let split = nodes[a].value.numel();
            if let Some(da) = acc(grads, nodes, a) {
                da.iter_mut().zip(&g[..split]).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = acc(grads, nodes, b) {
                db.iter_mut().zip(&g[split..]).for_each(|(d, gi)| *d += gi);
            }
        }
        &Op::SliceRows(x, start) => {
            let cols = nodes[x].value.shape()[1];
            if let Some(dx) = acc(grads, nodes, x) {
                let off = start * cols;
                dx[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gi)| *d += gi);
            }
        }
        &Op::ReverseRows(x) => {
            let shape = nodes[x].value.shape();
            let (rows, cols) = (shape[0], shape[1]);
            if let Some(dx) = acc(grads, nodes, x) {
                for r in 0..rows {
                    let src = &g[(rows - 1 - r) * cols..(rows - r) * cols];
                    dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = acc(grads, nodes, x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        &Op::MeanAll(x) => {
            if let Some(dx) = acc(grads, nodes, x) {
                let share = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += share);
            }
        }
        &Op::SumAll(x) => {
            if let Some(dx) = acc(grads, nodes, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::CausalConv { x, w, b } => {
            let (len, ch) = (nodes[x].value.shape()[0], nodes[x].value.shape()[1]);
            let width = nodes[w].value.shape()[1];
            let xv = nodes[x].value.data();
            let wv = nodes[w].value.data();
            if let Some(db) = acc(grads, nodes, b) {
                for row in g.chunks(ch) {
                    db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
            if let Some(dw) = acc(grads, nodes, w) {
                for t in 0..len {
                    for k in 0..width {
                        let Some(src) = (t + k + 1).checked_sub(width) else {
                            continue;
                        };
                        for c in 0..ch {
                            dw[c * width + k] += g[t * ch + c] * xv[src * ch + c];
                        }
                    }
                }
            }
            if let Some(dx) = acc(grads, nodes, x) {
                for t in 0..len {
                    for k in 0..width {
                        let Some(src) = (t + k + 1).checked_sub(width) else {
                            continue;
                        };
                        for c in 0..ch {
                            dx[src * ch + c] += g[t * ch + c] * wv[c * width + k];
                        }
                    }
                }
            }
        }
        &Op::DiscretizeA { delta, a } => {
            let (len, ch) = (nodes[delta].value.shape()[0], nodes[delta].value.shape()[1]);
            let n = nodes[a].value.shape()[1];
            let dv = nodes[delta].value.data();
            let av = nodes[a].value.data();
            let out = node.value.data();
            if let Some(dd) = acc(grads, nodes, delta) {
                for t in 0..len {
                    for c in 0..ch {
                        let base = (t * ch + c) * n;
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[base + j] * out[base + j] * av[c * n + j];
                        }
                        dd[t * ch + c] += s;
                    }
                }
            }
            if let Some(da) = acc(grads, nodes, a) {
                for t in 0..len {
                    for c in 0..ch {
                        let base = (t * ch + c) * n;
                        let dl = dv[t * ch + c];
                        for j in 0..n {
                            da[c * n + j] += g[base + j] * out[base + j] * dl;
                        }
                    }
                }
            }
        }
        &Op::DiscretizeB { delta, b } => {
            let (len, ch) = (nodes[delta].value.shape()[0], nodes[delta].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            let dv = nodes[delta].value.data();
            let bv = nodes[b].value.data();
            if let Some(dd) = acc(grads, nodes, delta) {
                for t in 0..len {
                    for c in 0..ch {
                        let base = (t * ch + c) * n;
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[base + j] * bv[t * n + j];
                        }
                        dd[t * ch + c] += s;
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, b) {
                for t in 0..len {
                    for c in 0..ch {
                        let base = (t * ch + c) * n;
                        let dl = dv[t * ch + c];
                        for j in 0..n {
                            db[t * n + j] += g[base + j] * dl;
                        }
                    }
                }
            }
        }
        Op::Scan {
            u,
            a_bar,
            b_bar,
            c,
            d,
            states,
        } => {
            let (len, ch) = (nodes[*u].value.shape()[0], nodes[*u].value.shape()[1]);
            let n = nodes[*c].value.shape()[1];
            let sg = kernels::scan_backward(
                g,
                nodes[*u].value.data(),
                nodes[*a_bar].value.data(),
                nodes[*b_bar].value.data(),
                nodes[*c].value.data(),
                nodes[*d].value.data(),
                states,
                len,
                ch,
                n,
            );
            for (id, src) in [
                (*u, sg.du),
                (*a_bar, sg.da_bar),
                (*b_bar, sg.db_bar),
                (*c, sg.dc),
                (*d, sg.dd),
            ] {
                if let Some(dst) = acc(grads, nodes, id) {
                    dst.iter_mut().zip(&src).for_each(|(o, s)| *o += s);
                }
            }
        }
        Op::ZohScan {
            u,
            delta,
            a,
            b,
            c,
            d,
            states,
            a_bar,
        } => {
            let (len, ch) = (nodes[*u].value.shape()[0], nodes[*u].value.shape()[1]);
            let n = nodes[*c].value.shape()[1];
            let sg = kernels::zoh_scan_backward(
                g,
                nodes[*u].value.data(),
                nodes[*delta].value.data(),
                nodes[*a].value.data(),
                nodes[*b].value.data(),
                nodes[*c].value.data(),
                nodes[*d].value.data(),
                states,
                a_bar,
                len,
                ch,
                n,
            );
            for (id, src) in [
                (*u, sg.du),
                (*delta, sg.ddelta),
                (*a, sg.da),
                (*b, sg.db),
                (*c, sg.dc),
                (*d, sg.dd),
            ] {
                if let Some(dst) = acc(grads, nodes, id) {
                    dst.iter_mut().zip(&src).for_each(|(o, s)| *o += s);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            if let Some(dl) = acc(grads, nodes, *logits) {
                for (k, p) in probs.iter().enumerate() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    dl[k] += g[0] * (p - target);
                }
            }
        }
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "variables from different tapes"
    );
}

// Ops are fallible (shape checks), so they cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The recorded value (shares storage with the tape).
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn with_data<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let t = &nodes[self.id].value;
        f(t.shape(), t.data())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a 2-D tensor, got {s:?}"),
            )),
        }
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &rhs);
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let a = self.value();
        let b = rhs.value();
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
        self.tape
            .push("matmul", vec![m, n], out, Op::MatMul(self.id, rhs.id))
    }

    fn binary(self, rhs: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        same_tape(&self, &rhs);
        let a = self.value();
        let b = rhs.value();
        let (bc, shape) = if a.shape() == b.shape() {
            (Broadcast::None, a.shape().to_vec())
        } else if a.is_scalar() {
            (Broadcast::Lhs, b.shape().to_vec())
        } else if b.is_scalar() {
            (Broadcast::Rhs, a.shape().to_vec())
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = match bc {
            Broadcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Lhs => bd.iter().map(|&y| f(ad[0], y)).collect(),
            Broadcast::Rhs => ad.iter().map(|&x| f(x, bd[0])).collect(),
        };
        debug_assert_eq!(n, shape.iter().product::<usize>());
        self.tape
            .push(name, shape, out, Op::Binary(kind, bc, self.id, rhs.id))
    }

    /// Elementwise sum; equal shapes or scalar-with-tensor only.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul, "mul")
    }

    /// Adds a `[C]` vector to every row of a `[L, C]` tensor.
    pub fn add_rows(self, v: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &v);
        let (rows, cols) = self.dims2("add_rows")?;
        let vv = v.value();
        if vv.shape() != [cols] {
            return Err(Error::shape(
                "add_rows",
                format!("[{rows},{cols}] + {:?}", vv.shape()),
            ));
        }
        let x = self.value();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(vv.data()).for_each(|(o, b)| *o += b);
        }
        self.tape.push(
            "add_rows",
            vec![rows, cols],
            out,
            Op::AddRows(self.id, v.id),
        )
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.data().iter().map(|v| v * k).collect();
        self.tape
            .push("scale", x.shape().to_vec(), out, Op::Scale(self.id, k))
    }

    fn unary(self, f: Unary) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.data().iter().map(|&v| f.apply(v)).collect();
        self.tape
            .push(f.name(), x.shape().to_vec(), out, Op::Unary(f, self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Unary::Silu)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "last axis {c}, gamma {:?}, beta {:?}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = x.numel() / c.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for (r, row) in x.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.push(
            "layer_norm",
            x.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    /// Stacks the rows of `self` above the rows of `rhs`.
    pub fn concat_rows(self, rhs: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &rhs);
        let (la, ca) = self.dims2("concat_rows")?;
        let (lb, cb) = rhs.dims2("concat_rows")?;
        if ca != cb {
            return Err(Error::shape(
                "concat_rows",
                format!("[{la},{ca}] ⊕ [{lb},{cb}]"),
            ));
        }
        let mut out = Vec::with_capacity((la + lb) * ca);
        out.extend_from_slice(self.value().data());
        out.extend_from_slice(rhs.value().data());
        self.tape.push(
            "concat_rows",
            vec![la + lb, ca],
            out,
            Op::ConcatRows(self.id, rhs.id),
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start > end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} of {rows} rows"),
            ));
        }
        let out = self.with_data(|_, d| d[start * cols..end * cols].to_vec());
        self.tape.push(
            "slice_rows",
            vec![end - start, cols],
            out,
            Op::SliceRows(self.id, start),
        )
    }

    /// Row `i` of a `[L, C]` tensor as a `[C]` vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let (_, cols) = self.dims2("row")?;
        self.slice_rows(i, i + 1)?.reshape(&[cols])
    }

    pub fn reverse_rows(self) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("reverse_rows")?;
        let out = self.with_data(|_, d| {
            let mut out = Vec::with_capacity(d.len());
            for r in (0..rows).rev() {
                out.extend_from_slice(&d[r * cols..(r + 1) * cols]);
            }
            out
        });
        self.tape.push(
            "reverse_rows",
            vec![rows, cols],
            out,
            Op::ReverseRows(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", x.shape(), shape),
            ));
        }
        self.tape.push(
            "reshape",
            shape.to_vec(),
            x.data().to_vec(),
            Op::Reshape(self.id),
        )
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(self) -> Result<Var<'t>> {
        let s = self.with_data(|_, d| {
            if d.is_empty() {
                None
            } else {
                Some(d.iter().sum::<f64>() / d.len() as f64)
            }
        });
        let s = s.ok_or(Error::EmptySequence("mean_all"))?;
        self.tape
            .push("mean_all", vec![], vec![s], Op::MeanAll(self.id))
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let s = self.with_data(|_, d| d.iter().sum::<f64>());
        self.tape
            .push("sum_all", vec![], vec![s], Op::SumAll(self.id))
    }

    /// Depthwise causal 1-D convolution along rows: `x [L, C]`, `w [C, K]`, `b [C]`.
    /// Output row `t` sees input rows `t-K+1 ..= t` (zero-padded on the left).
    pub fn causal_conv(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (len, ch) = self.dims2("causal_conv")?;
        let (wc, width) = w.dims2("causal_conv")?;
        let bv = b.value();
        if wc != ch || bv.shape() != [ch] || width == 0 {
            return Err(Error::shape(
                "causal_conv",
                format!("x [{len},{ch}], w [{wc},{width}], b {:?}", bv.shape()),
            ));
        }
        let xv = self.value();
        let wv = w.value();
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            out[t * ch..(t + 1) * ch].copy_from_slice(bv.data());
            for k in 0..width {
                let Some(src) = (t + k + 1).checked_sub(width) else {
                    continue;
                };
                for c in 0..ch {
                    out[t * ch + c] += wd[c * width + k] * xd[src * ch + c];
                }
            }
        }
        self.tape.push(
            "causal_conv",
            vec![len, ch],
            out,
            Op::CausalConv {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        )
    }

    /// `logsumexp(logits) - logits[label]` for a `[K]` logit vector.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t>> {
        let z = self.value();
        if z.shape().len() != 1 || label >= z.numel() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, label {label}", z.shape()),
            ));
        }
        let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = max + total.ln() - z.data()[label];
        self.tape.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
        )
    }
}

/// Dispatches one of the pointwise functions; binary variants need `y`.
pub fn elementwise<'t>(f: Elementwise, x: Var<'t>, y: Option<Var<'t>>) -> Result<Var<'t>> {
    let need_rhs = || y.ok_or_else(|| Error::shape("elementwise", "binary op without rhs"));
    match f {
        Elementwise::Sigmoid => x.sigmoid(),
        Elementwise::Softplus => x.softplus(),
        Elementwise::Silu => x.silu(),
        Elementwise::Exp => x.exp(),
        Elementwise::Add => x.add(need_rhs()?),
        Elementwise::Mul => x.mul(need_rhs()?),
    }
}

/// Rows of `a` followed by rows of `b`.
pub fn concat_tokens<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.concat_rows(b)
}

/// Zero-order-hold discretization of the diagonal state matrix and Euler
/// discretization of the input matrix.
///
/// `delta [L, C]`, `a_diag [C, N]`, `b [L, N]` give
/// `a_bar[t,c,n] = exp(delta[t,c] · a_diag[c,n])` and
/// `b_bar[t,c,n] = delta[t,c] · b[t,n]`.
pub fn discretize<'t>(delta: Var<'t>, a_diag: Var<'t>, b: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (len, ch) = delta.dims2("discretize")?;
    let (ac, n) = a_diag.dims2("discretize")?;
    let (bl, bn) = b.dims2("discretize")?;
    if ac != ch || bl != len || bn != n {
        return Err(Error::shape(
            "discretize",
            format!("delta [{len},{ch}], a [{ac},{n}], b [{bl},{bn}]"),
        ));
    }
    let (dv, av, bv) = (delta.value(), a_diag.value(), b.value());
    let (dd, ad, bd) = (dv.data(), av.data(), bv.data());
    let mut a_bar = vec![0.0; len * ch * n];
    let mut b_bar = vec![0.0; len * ch * n];
    for t in 0..len {
        for c in 0..ch {
            let dl = dd[t * ch + c];
            let base = (t * ch + c) * n;
            for j in 0..n {
                a_bar[base + j] = (dl * ad[c * n + j]).exp();
                b_bar[base + j] = dl * bd[t * n + j];
            }
        }
    }
    let tape = delta.tape;
    let a_out = tape.push(
        "discretize(a)",
        vec![len, ch, n],
        a_bar,
        Op::DiscretizeA {
            delta: delta.id,
            a: a_diag.id,
        },
    )?;
    let b_out = tape.push(
        "discretize(b)",
        vec![len, ch, n],
        b_bar,
        Op::DiscretizeB {
            delta: delta.id,
            b: b.id,
        },
    )?;
    Ok((a_out, b_out))
}

/// Recorded selective scan; see [`kernels::scan_forward`] for the recurrence.
pub fn selective_scan<'t>(
    u: Var<'t>,
    a_bar: Var<'t>,
    b_bar: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (len, ch) = u.dims2("selective_scan")?;
    let (cl, n) = c.dims2("selective_scan")?;
    let (av, bv, dv) = (a_bar.value(), b_bar.value(), d.value());
    if cl != len || av.shape() != [len, ch, n] || bv.shape() != [len, ch, n] || dv.shape() != [ch] {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u [{len},{ch}], a_bar {:?}, b_bar {:?}, c [{cl},{n}], d {:?}",
                av.shape(),
                bv.shape(),
                dv.shape()
            ),
        ));
    }
    let uv = u.value();
    let cv = c.value();
    let mut states = vec![0.0; len * ch * n];
    let y = kernels::scan_forward(
        uv.data(),
        av.data(),
        bv.data(),
        cv.data(),
        dv.data(),
        len,
        ch,
        n,
        Some(&mut states),
    );
    u.tape.push(
        "selective_scan",
        vec![len, ch],
        y,
        Op::Scan {
            u: u.id,
            a_bar: a_bar.id,
            b_bar: b_bar.id,
            c: c.id,
            d: d.id,
            states,
        },
    )
}

/// Fused [`discretize`] + [`selective_scan`]: `u, delta [L, C]`,
/// `a_diag [C, N]`, `b, c [L, N]`, `d [C]`. Same values and gradients as the
/// two-step composition without the `[L, C, N]` intermediates on the tape.
pub fn selective_scan_zoh<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a_diag: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (len, ch) = u.dims2("selective_scan_zoh")?;
    let (dl, dc) = delta.dims2("selective_scan_zoh")?;
    let (ac, n) = a_diag.dims2("selective_scan_zoh")?;
    let (bl, bn) = b.dims2("selective_scan_zoh")?;
    let (cl, cn) = c.dims2("selective_scan_zoh")?;
    let dv = d.value();
    if (dl, dc) != (len, ch)
        || ac != ch
        || (bl, bn) != (len, n)
        || (cl, cn) != (len, n)
        || dv.shape() != [ch]
    {
        return Err(Error::shape(
            "selective_scan_zoh",
            format!(
                "u [{len},{ch}], delta [{dl},{dc}], a [{ac},{n}], b [{bl},{bn}], c [{cl},{cn}], d {:?}",
                dv.shape()
            ),
        ));
    }
    let mut states = vec![0.0; len * ch * n];
    let mut a_bar = vec![0.0; len * ch * n];
    let y = kernels::zoh_scan_forward(
        u.value().data(),
        delta.value().data(),
        a_diag.value().data(),
        b.value().data(),
        c.value().data(),
        dv.data(),
        len,
        ch,
        n,
        Some((&mut states, &mut a_bar)),
    );
    u.tape.push(
        "selective_scan_zoh",
        vec![len, ch],
        y,
        Op::ZohScan {
            u: u.id,
            delta: delta.id,
            a: a_diag.id,
            b: b.id,
            c: c.id,
            d: d.id,
            states,
            a_bar,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_sums_via_matmul() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = a.matmul(ones).unwrap();
        assert_eq!(y.shape(), vec![2, 1]);
        assert_eq!(y.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_analytic_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0).unwrap());
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
        assert_eq!(z.silu().unwrap().item(), 0.0);
        assert!((z.softplus().unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(z.exp().unwrap().item(), 1.0);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0).unwrap());
        let y = x.sigmoid().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn binary_requires_equal_shapes_or_scalar() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let row = tape.constant(Tensor::zeros(&[3]));
        let s = tape.constant(Tensor::scalar(2.0).unwrap());
        assert!(a.add(b).is_err());
        assert!(a.mul(row).is_err());
        assert_eq!(a.mul(s).unwrap().shape(), vec![2, 3]);
        assert_eq!(s.add(a).unwrap().shape(), vec![2, 3]);
    }

    #[test]
    fn elementwise_binary_without_rhs_fails() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        assert!(elementwise(Elementwise::Add, a, None).is_err());
        assert_eq!(
            elementwise(Elementwise::Sigmoid, a, None)
                .unwrap()
                .value()
                .data(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn layer_norm_unit_pair() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = x.layer_norm(g, b, 1e-6).unwrap().value();
        assert!((y.data()[0] - 0.9999995).abs() < 1e-9);
        assert!((y.data()[1] + 0.9999995).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_returns_beta() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[4.0, 4.0, 4.0]));
        let g = tape.constant(t(&[3], &[2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_width_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let g = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(x.layer_norm(g, b, 1e-5).is_err());
    }

    #[test]
    fn concat_preserves_order_and_empty_is_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let ab = concat_tokens(a, b).unwrap();
        assert_eq!(ab.shape(), vec![3, 2]);
        assert_eq!(ab.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert_eq!(concat_tokens(empty, b).unwrap().value(), b.value());
    }

    #[test]
    fn concat_channel_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(a.concat_rows(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn concat_gradient_splits_by_rows() {
        let tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = a.concat_rows(b).unwrap().mul(w).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn mean_all_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.mean_all().unwrap().item(), 2.0);
        let z = tape.constant(Tensor::zeros(&[4, 5]));
        assert_eq!(z.mean_all().unwrap().item(), 0.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[10]));
        let g = tape.backward(x.mean_all().unwrap()).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn mean_all_of_empty_fails() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(x.mean_all().is_err());
    }

    #[test]
    fn backward_mean_of_five() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap());
        let g = tape.backward(x.mean_all().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.2; 5]);
        let leaf = g.leaf_with_grad(x);
        assert_eq!(leaf.grad(), Some(&[0.2; 5][..]));
    }

    #[test]
    fn backward_sigmoid_chain() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0).unwrap());
        let x = tape.constant(Tensor::scalar(1.0).unwrap());
        let loss = w.mul(x).unwrap().sigmoid().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.25]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let loss = x.sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0).unwrap());
        assert!(matches!(x.exp(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn causal_conv_only_sees_the_past() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 3], &[0.5, 0.25, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = x.causal_conv(w, b).unwrap().value();
        // y_t = 0.5 x_{t-2} + 0.25 x_{t-1} + x_t
        assert_eq!(y.data(), &[1.0, 2.25, 4.0, 5.75]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[4]));
        let loss = z.cross_entropy(2).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn reverse_and_slice_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert_eq!(x.reverse_rows().unwrap().value().data(), &[3.0, 2.0, 1.0]);
        assert_eq!(x.slice_rows(1, 3).unwrap().value().data(), &[2.0, 3.0]);
        assert!(x.slice_rows(2, 4).is_err());
        assert_eq!(x.row(2).unwrap().shape(), vec![1]);
    }
}
