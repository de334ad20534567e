//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Nodes are numbered at
//! creation, so parents always carry smaller ids than their children and a
//! descending-id sweep over the reachable set is a valid reverse topological
//! order. When gradients are disabled (see [`no_grad`]) or no input requires
//! a gradient, ops produce detached leaves and intermediates are freed as soon
//! as the caller drops them.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::{gemm, record_macs, round_to_precision, Tensor};
use crate::error::{bail, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` without recording a graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Which score entries a row-wise softmax may attend to.
#[derive(Clone, Debug)]
pub enum Mask {
    None,
    /// Lower-triangular: row `i` sees columns `0..=i`.
    Causal,
    /// Explicit row-major admissibility matrix.
    Allowed(Rc<Vec<bool>>),
}

impl Mask {
    fn admits(&self, i: usize, j: usize, cols: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Allowed(m) => m[i * cols + j],
        }
    }
}

/// A sparse linear map over rows: output row `i` is `Σ w·x[k]` over `rows[i]`.
///
/// Gathering, scattering, group means and adaptive pooling are all row mixes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(indices: &[usize]) -> Self {
        RowMix {
            rows: indices.iter().map(|&k| vec![(k, 1.0)]).collect(),
        }
    }

    pub fn group_means(groups: &[Vec<usize>]) -> Self {
        RowMix {
            rows: groups
                .iter()
                .map(|g| {
                    let w = 1.0 / g.len() as f64;
                    g.iter().map(|&k| (k, w)).collect()
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies the mix to a plain tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.cols();
        let n_in = x.rows();
        let mut out = vec![0.0; self.rows.len() * d];
        for (i, terms) in self.rows.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            // a plain copy keeps gathered rows bit-identical, signed zeros included
            if let [(k, w)] = terms.as_slice() {
                if *w == 1.0 && *k < n_in {
                    dst.copy_from_slice(x.row(*k));
                    continue;
                }
            }
            for &(k, w) in terms {
                if k >= n_in {
                    bail!(Index, "row mix references row {k} of {n_in}");
                }
                for (o, v) in dst.iter_mut().zip(x.row(k)) {
                    *o += w * v;
                }
            }
        }
        if self.rows.is_empty() {
            bail!(Dimension, "row mix produces no rows");
        }
        Tensor::new(vec![self.rows.len(), d], out)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowMix { x: Var, mix: Rc<RowMix> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    Rope { x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>, heads: usize },
    SoftmaxCe { logits: Var, targets: Rc<Vec<usize>>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::Transpose(_) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::RowMix { .. } => "row_mix",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormRows { .. } => "l2_normalize",
            Op::Rope { .. } => "rope",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRow { x, bias } => vec![x, bias],
            Op::ScaleBy { x, s } => vec![x, s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale { x, .. }
            | Op::SliceCols { x, .. }
            | Op::RowMix { x, .. }
            | Op::L2NormRows { x, .. }
            | Op::Rope { x, .. } => vec![x],
            Op::Exp(x) | Op::Gelu(x) | Op::Transpose(x) | Op::Softmax(x) => vec![x],
            Op::Sum(x) | Op::Mean(x) => vec![x],
            Op::SoftmaxCe { logits, .. } => vec![logits],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().collect(),
        }
    }
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A node in the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.0.value.shape())
            .finish()
    }
}

/// The topologically ordered node list reachable from a root.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    /// `(node id, op name, parent ids)`, parents first.
    pub nodes: Vec<(u64, &'static str, Vec<u64>)>,
}

impl Var {
    /// A leaf that accumulates a gradient during [`Var::backward`].
    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, grad_enabled())
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            requires_grad,
            grad: RefCell::new(None),
        }))
    }

    fn from_op(mut value: Tensor, op: Op) -> Result<Var> {
        round_to_precision(value.data_mut());
        value.ensure_finite(op.name())?;
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            requires_grad,
            grad: RefCell::new(None),
        })))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.0.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.cols()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::new(self.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn accumulate(&self, g: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn reachable(&self) -> Vec<Var> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut out = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.0.requires_grad || !seen.insert(v.0.id) {
                continue;
            }
            for p in v.0.op.parents() {
                stack.push(p.clone());
            }
            out.push(v);
        }
        out.sort_by_key(|v| std::cmp::Reverse(v.0.id));
        out
    }

    pub fn graph(&self) -> ComputeGraph {
        let mut nodes: Vec<_> = self
            .reachable()
            .into_iter()
            .map(|v| {
                let parents = v.0.op.parents().iter().map(|p| p.0.id).collect();
                (v.0.id, v.0.op.name(), parents)
            })
            .collect();
        nodes.reverse();
        ComputeGraph { nodes }
    }

    /// Back-propagates from this node with a seed of ones.
    ///
    /// Leaves keep their accumulated gradients; interior gradients are
    /// released once propagated.
    pub fn backward(&self) {
        if !self.0.requires_grad {
            return;
        }
        self.accumulate(&vec![1.0; self.0.value.numel()]);
        for node in self.reachable() {
            if matches!(node.0.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            node.propagate(&g);
        }
    }

    fn propagate(&self, g: &[f64]) {
        let y = &self.0.value;
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (a.rows(), a.cols());
                let n = y.cols();
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    if *trans_b {
                        // b is n×k: da = g · b
                        gemm(m, n, k, g, (n, 1), b.value().data(), (k, 1), &mut da, 0.0);
                    } else {
                        // b is k×n: da = g · bᵀ
                        gemm(m, n, k, g, (n, 1), b.value().data(), (1, n), &mut da, 0.0);
                    }
                    a.accumulate(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // db (n×k) = gᵀ · a
                        gemm(n, m, k, g, (1, n), a.value().data(), (k, 1), &mut db, 0.0);
                    } else {
                        // db (k×n) = aᵀ · g
                        gemm(k, m, n, a.value().data(), (1, k), g, (n, 1), &mut db, 0.0);
                    }
                    b.accumulate(&db);
                }
            }
            Op::Add(a, b) => {
                a.accumulate(g);
                b.accumulate(g);
            }
            Op::Sub(a, b) => {
                a.accumulate(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accumulate(&neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(b.value().data()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.iter().zip(a.value().data()).map(|(g, a)| g * a).collect();
                a.accumulate(&da);
                b.accumulate(&db);
            }
            Op::AddRow { x, bias } => {
                x.accumulate(g);
                let d = bias.value().numel();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                bias.accumulate(&db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                x.accumulate(&dx);
            }
            Op::ScaleBy { x, s } => {
                let sv = s.item();
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                x.accumulate(&dx);
                let ds = g
                    .iter()
                    .zip(x.value().data())
                    .fold(0.0, |acc, (g, x)| acc + g * x);
                s.accumulate(&[ds]);
            }
            Op::Exp(x) => {
                let dx: Vec<f64> = g.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                x.accumulate(&dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.value().data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                x.accumulate(&dx);
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                x.accumulate(&dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = (y.rows(), y.cols());
                let xc = x.cols();
                let mut dx = vec![0.0; rows * xc];
                for i in 0..rows {
                    dx[i * xc + start..i * xc + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                x.accumulate(&dx);
            }
            Op::ConcatCols(xs) => {
                let rows = y.rows();
                let total = y.cols();
                let mut off = 0;
                for x in xs {
                    let w = x.cols();
                    let mut dx = vec![0.0; rows * w];
                    for i in 0..rows {
                        dx[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    x.accumulate(&dx);
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = x.value().numel();
                    x.accumulate(&g[off..off + n]);
                    off += n;
                }
            }
            Op::RowMix { x, mix } => {
                let d = y.cols();
                let mut dx = vec![0.0; x.value().numel()];
                for (i, terms) in mix.rows.iter().enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    for &(k, w) in terms {
                        for (acc, v) in dx[k * d..(k + 1) * d].iter_mut().zip(gi) {
                            *acc += w * v;
                        }
                    }
                }
                x.accumulate(&dx);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let inner = yr.iter().zip(gr).fold(0.0, |acc, (y, g)| acc + y * g);
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - inner);
                    }
                }
                x.accumulate(&dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = y.cols();
                let gv = gamma.value().data();
                let mut dx = vec![0.0; y.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let s = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = s * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                x.accumulate(&dx);
                gamma.accumulate(&dgamma);
                beta.accumulate(&dbeta);
            }
            Op::L2NormRows { x, norms } => {
                let d = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (r, ((yr, gr), dr)) in y
                    .data()
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let inner = yr.iter().zip(gr).fold(0.0, |acc, (y, g)| acc + y * g);
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - y * inner) / norms[r];
                    }
                }
                x.accumulate(&dx);
            }
            Op::Rope { x, cos, sin, heads } => {
                let dx = rotate(g, y.rows(), y.cols(), *heads, cos, sin, true);
                x.accumulate(&dx);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let v = logits.cols();
                let n = targets.len() as f64;
                let scale = g[0] / n;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * v + t] -= scale;
                }
                logits.accumulate(&dx);
            }
            Op::Sum(x) => x.accumulate(&vec![g[0]; x.value().numel()]),
            Op::Mean(x) => {
                let n = x.value().numel();
                x.accumulate(&vec![g[0] / n as f64; n]);
            }
        }
    }

    // ---- forward ops ----

    fn same_shape(&self, other: &Var, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            );
        }
        Ok(())
    }

    /// `self[M×K] · other[K×N]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, false)
    }

    /// `self[M×K] · other[N×K]ᵀ`.
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var, trans_b: bool) -> Result<Var> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = if trans_b {
            (other.rows(), other.cols())
        } else {
            (other.cols(), other.rows())
        };
        if k != k2 {
            bail!(
                Dimension,
                "matmul inner dimensions disagree: {:?} by {:?}{}",
                self.shape(),
                other.shape(),
                if trans_b { "ᵀ" } else { "" }
            );
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, self.value().data(), (k, 1), other.value().data(), bs, &mut out, 0.0);
        record_macs((m * k * n) as u64);
        Var::from_op(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b,
            },
        )
    }

    fn zip_with(&self, other: &Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, what)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let t = self.zip_with(other, "add", |a, b| a + b)?;
        Var::from_op(t, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let t = self.zip_with(other, "sub", |a, b| a - b)?;
        Var::from_op(t, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let t = self.zip_with(other, "mul", |a, b| a * b)?;
        Var::from_op(t, Op::Mul(self.clone(), other.clone()))
    }

    /// Adds a length-D vector to every row of an N×D matrix.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let d = self.cols();
        if bias.value().numel() != d {
            bail!(
                Dimension,
                "add_row: bias of {} entries for {d} columns",
                bias.value().numel()
            );
        }
        let b = bias.value().data();
        let mut data = self.value().data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(b) {
                *v += b;
            }
        }
        Var::from_op(
            Tensor::new(self.shape().to_vec(), data)?,
            Op::AddRow {
                x: self.clone(),
                bias: bias.clone(),
            },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let data = self.value().data().iter().map(|v| v * c).collect();
        Var::from_op(
            Tensor::new(self.shape().to_vec(), data)?,
            Op::Scale { x: self.clone(), c },
        )
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        if s.value().numel() != 1 {
            bail!(Dimension, "scale_by needs a one-element scale, got {:?}", s.shape());
        }
        let sv = s.item();
        let data = self.value().data().iter().map(|v| v * sv).collect();
        Var::from_op(
            Tensor::new(self.shape().to_vec(), data)?,
            Op::ScaleBy {
                x: self.clone(),
                s: s.clone(),
            },
        )
    }

    pub fn exp(&self) -> Result<Var> {
        let data = self.value().data().iter().map(|v| v.exp()).collect();
        Var::from_op(Tensor::new(self.shape().to_vec(), data)?, Op::Exp(self.clone()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var> {
        let data = self.value().data().iter().map(|&v| gelu(v)).collect();
        Var::from_op(Tensor::new(self.shape().to_vec(), data)?, Op::Gelu(self.clone()))
    }

    pub fn transpose(&self) -> Result<Var> {
        let t = self.value().transpose()?;
        Var::from_op(t, Op::Transpose(self.clone()))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let c = self.cols();
        if len == 0 || start + len > c {
            bail!(Index, "column slice {start}..{} of {c}", start + len);
        }
        let rows = self.rows();
        let src = self.value().data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Var::from_op(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        )
    }

    pub fn concat_cols(xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            bail!(Dimension, "concat_cols of nothing");
        };
        let rows = first.rows();
        if xs.iter().any(|x| x.rows() != rows) {
            bail!(Dimension, "concat_cols: row counts differ");
        }
        let total: usize = xs.iter().map(|x| x.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for x in xs {
                data.extend_from_slice(x.value().row(i));
            }
        }
        Var::from_op(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            bail!(Dimension, "concat_rows of nothing");
        };
        let d = first.cols();
        if xs.iter().any(|x| x.cols() != d) {
            bail!(Dimension, "concat_rows: column counts differ");
        }
        let rows: usize = xs.iter().map(|x| x.rows()).sum();
        let mut data = Vec::with_capacity(rows * d);
        for x in xs {
            data.extend_from_slice(x.value().data());
        }
        Var::from_op(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(xs.to_vec()))
    }

    pub fn row_mix(&self, mix: Rc<RowMix>) -> Result<Var> {
        let t = mix.apply(self.value())?;
        Var::from_op(t, Op::RowMix { x: self.clone(), mix })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        self.row_mix(Rc::new(RowMix::gather(indices)))
    }

    /// Row-wise softmax restricted to admissible entries; others get zero.
    pub fn softmax_rows(&self, mask: &Mask) -> Result<Var> {
        let (r, c) = (self.rows(), self.cols());
        let x = self.value().data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.admits(i, j, c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                bail!(Numeric, "softmax row {i} has no admissible entries");
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask.admits(i, j, c) {
                    let e = (v - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        Var::from_op(Tensor::new(vec![r, c], out)?, Op::Softmax(self.clone()))
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let d = self.cols();
        if gamma.value().numel() != d || beta.value().numel() != d {
            bail!(Dimension, "layer_norm parameters must have {d} entries");
        }
        let x = self.value().data();
        let gv = gamma.value().data();
        let bv = beta.value().data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(self.rows());
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(d).enumerate() {
            let mean = row.iter().fold(0.0, |a, v| a + v) / d as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Var::from_op(
            Tensor::new(self.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        )
    }

    /// Divides each row by its Euclidean norm. A zero row is a numeric error.
    pub fn l2_normalize_rows(&self) -> Result<Var> {
        let d = self.cols();
        let mut out = self.value().data().to_vec();
        let mut norms = Vec::with_capacity(self.rows());
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = super::norm(row);
            if n == 0.0 {
                bail!(Numeric, "cannot normalize zero-norm vector at row {r}");
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        Var::from_op(
            Tensor::new(self.shape().to_vec(), out)?,
            Op::L2NormRows {
                x: self.clone(),
                norms,
            },
        )
    }

    /// Rotary embedding applied per head; each head's dimension pairs
    /// `(i, i + dh/2)` rotate by `pos · base^(-2i/dh)`.
    pub fn rope(&self, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (n, d) = (self.rows(), self.cols());
        if positions.len() != n {
            bail!(Dimension, "rope: {} positions for {n} rows", positions.len());
        }
        if d % heads != 0 || (d / heads) % 2 != 0 {
            bail!(Dimension, "rope: head width must be even, got {d}/{heads}");
        }
        let half = d / heads / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / (2 * half) as f64);
                let a = p as f64 * freq;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        let out = rotate(self.value().data(), n, d, heads, &cos, &sin, false);
        Var::from_op(
            Tensor::new(vec![n, d], out)?,
            Op::Rope {
                x: self.clone(),
                cos: Rc::new(cos),
                sin: Rc::new(sin),
                heads,
            },
        )
    }

    /// Mean negative log-softmax of the target entries.
    pub fn softmax_ce(&self, targets: &[usize]) -> Result<Var> {
        let (n, v) = (self.rows(), self.cols());
        if targets.len() != n {
            bail!(Dimension, "softmax_ce: {} targets for {n} rows", targets.len());
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            bail!(Index, "target {t} out of range for vocabulary {v}");
        }
        let x = self.value().data();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().fold(0.0, |a, &l| a + (l - max).exp());
            let lse = max + z.ln();
            loss += lse - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        Var::from_op(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits: self.clone(),
                targets: Rc::new(targets.to_vec()),
                probs,
            },
        )
    }

    pub fn sum(&self) -> Result<Var> {
        Var::from_op(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f64;
        Var::from_op(Tensor::scalar(self.value().sum() / n), Op::Mean(self.clone()))
    }
}

fn rotate(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let half = dh / 2;
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for h in 0..heads {
            let base = r * d + h * dh;
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let s = if inverse { -s } else { s };
                let a = x[base + i];
                let b = x[base + i + half];
                out[base + i] = a * c - b * s;
                out[base + i + half] = a * s + b * c;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
