//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for [`Graph::backward`]. Leaves may borrow their
//! values (parameters shared read-only between graphs) or own them.
//!
//! All values are `f64`. Binary operations broadcast in the limited way the
//! model needs: each operand is viewed as `rows x cols` (`cols` = last
//! dimension) and either dimension may be 1.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{gelu, gelu_derivative, sum_unordered};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Gelu(Var),
    Softmax(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    MaskedFill { a: Var, mask: Vec<bool> },
    Gather { table: Var, ids: Vec<Option<usize>> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `rows x cols` view with `cols` the last dimension.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, rest)) => (numel(rest), cols),
    }
}

fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

/// `out[i, j] = sum_k a[i, k] * b[k, j]`, accumulated sequentially over `k`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Same product with each output summed in an order that does not depend on
/// the order of `k` (sorted addends).
fn matmul_unordered_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut terms = vec![0.0; k];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                terms[p] = a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = sum_unordered(&mut terms);
        }
    }
    out
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], value: Cow<'a, [f64]>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), value.len()),
            ));
        }
        ensure_finite("leaf", &value)?;
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, Cow::Owned(values), false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, Cow::Owned(values), true)
    }

    /// Leaf borrowing its values, e.g. a parameter shared across graphs.
    pub fn borrowed(&mut self, shape: &[usize], values: &'a [f64], requires_grad: bool) -> Result<Var> {
        self.leaf(shape, Cow::Borrowed(values), requires_grad)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(&[], vec![value])
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        ensure_finite(name, &value)?;
        Ok(self.push(shape, Cow::Owned(value), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product whose reductions are invariant to permuting the inner
    /// dimension. Attention uses it to combine values across key positions.
    pub fn matmul_unordered(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, unordered: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = if unordered {
            matmul_unordered_kernel(av, bv, m, k, n)
        } else {
            matmul_kernel(av, bv, m, k, n)
        };
        let rg = self.rg(&[a, b]);
        self.record("matmul", vec![m, n], out, Op::MatMul { a, b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.record("transpose", vec![c, r], out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn broadcast_dims(&self, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if numel(sa) >= numel(sb) { sa } else { sb };
        let (r, c) = as_matrix(out_shape);
        let fits = |s: &[usize]| {
            let (sr, sc) = as_matrix(s);
            (sr == r || sr == 1) && (sc == c || sc == 1)
        };
        if !fits(sa) || !fits(sb) {
            return Err(shape_err("elementwise", format!("cannot broadcast {:?} with {:?}", sa, sb)));
        }
        Ok((out_shape.to_vec(), r, c))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (shape, r, c) = self.broadcast_dims(a, b)?;
        let (ar, ac) = as_matrix(self.shape(a));
        let (br, bc) = as_matrix(self.shape(b));
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ar == 1 { 0 } else { i * ac };
            let ib = if br == 1 { 0 } else { i * bc };
            for j in 0..c {
                let x = av[ia + if ac == 1 { 0 } else { j }];
                let y = bv[ib + if bc == 1 { 0 } else { j }];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                });
            }
        }
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "divide",
        };
        let rg = self.rg(&[a, b]);
        self.record(name, shape, out, Op::Binary { kind, a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.record("scale", shape, out, Op::Scale { a, factor }, rg)
    }

    /// Elementwise GELU, exact `x * Phi(x)` form.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| gelu(v)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.record("activation", shape, out, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_matrix(&shape);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = libm::exp(x - max);
            }
            let mut scratch = dst.to_vec();
            let total = sum_unordered(&mut scratch);
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let rg = self.rg(&[a]);
        self.record("softmax", shape, out, Op::Softmax(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_matrix(&shape);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = inv;
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let rg = self.rg(&[a]);
        self.record("layer-normalize", shape, out, Op::LayerNorm { a, inv_std }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.record("sum", Vec::new(), vec![total], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let total = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.record("mean", Vec::new(), vec![total], Op::Mean(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * v).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.record("square", shape, out, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let out = self.value(a).iter().map(|&v| libm::sqrt(v)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.record("sqrt", shape, out, Op::Sqrt(a), rg)
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(shape_err(
                    "concat",
                    format!("leading dims {:?} vs {:?}", lead, s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        self.record("concat", shape, out, Op::Concat(parts.to_vec()), rg)
    }

    /// Slice of the last axis.
    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_matrix(&shape);
        if range.start > range.end || range.end > c || shape.is_empty() {
            return Err(shape_err("slice", format!("columns {:?} of {:?}", range, shape)));
        }
        let w = range.end - range.start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + range.start..i * c + range.end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w;
        let rg = self.rg(&[a]);
        self.record("slice", out_shape, out, Op::SliceCols { a, start: range.start }, rg)
    }

    /// Slice of the first axis of a matrix.
    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice", a)?;
        if range.start > range.end || range.end > r {
            return Err(shape_err("slice", format!("rows {:?} of [{r}, {c}]", range)));
        }
        let out = self.value(a)[range.start * c..range.end * c].to_vec();
        let rg = self.rg(&[a]);
        self.record(
            "slice",
            vec![range.end - range.start, c],
            out,
            Op::SliceRows { a, start: range.start },
            rg,
        )
    }

    /// Replaces entries whose column is flagged in `mask` with `fill`. The
    /// mask runs along the last axis and is shared by every row.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = as_matrix(&shape);
        if mask.len() != c {
            return Err(shape_err("masked-fill", format!("mask of {} for last dim {c}", mask.len())));
        }
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for (o, &m) in out[i * c..(i + 1) * c].iter_mut().zip(mask) {
                if m {
                    *o = fill;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.record("masked-fill", shape, out, Op::MaskedFill { a, mask: mask.to_vec() }, rg)
    }

    /// Row lookup into a `[n, d]` table; `None` yields a zero row that
    /// carries no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather", table)?;
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (row, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= n {
                    return Err(shape_err("gather", format!("row {id} of table with {n} rows")));
                }
                out[row * d..(row + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(&[table]);
        self.record("gather", vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let node = &self.nodes[root.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(Error::Contract("backward root does not require grad".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |var: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = as_matrix(self.shape(a));
                let n = as_matrix(self.shape(b)).1;
                let (av, bv) = (self.value(a), self.value(b));
                // dA = G B^T
                acc(a, &|ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                acc(b, &|gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av_ip * x;
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = as_matrix(self.shape(a));
                acc(a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Binary { kind, a, b } => {
                let (r, c) = as_matrix(&node.shape);
                let (ar, ac) = as_matrix(self.shape(a));
                let (br, bc) = as_matrix(self.shape(b));
                let (av, bv) = (self.value(a), self.value(b));
                let ia = |i: usize, j: usize| (if ar == 1 { 0 } else { i * ac }) + if ac == 1 { 0 } else { j };
                let ib = |i: usize, j: usize| (if br == 1 { 0 } else { i * bc }) + if bc == 1 { 0 } else { j };
                acc(a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            ga[ia(i, j)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gij,
                                BinaryKind::Mul => gij * bv[ib(i, j)],
                                BinaryKind::Div => gij / bv[ib(i, j)],
                            };
                        }
                    }
                });
                acc(b, &|gb| {
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            let y = bv[ib(i, j)];
                            gb[ib(i, j)] += match kind {
                                BinaryKind::Add => gij,
                                BinaryKind::Sub => -gij,
                                BinaryKind::Mul => gij * av[ia(i, j)],
                                BinaryKind::Div => -gij * av[ia(i, j)] / (y * y),
                            };
                        }
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &|ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x * factor;
                }
            }),
            &Op::Gelu(a) => {
                let av = self.value(a);
                acc(a, &|ga| {
                    for ((o, x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *o += x * gelu_derivative(v);
                    }
                });
            }
            &Op::Softmax(a) => {
                let (r, c) = as_matrix(&node.shape);
                let y = &node.value;
                acc(a, &|ga| {
                    for i in 0..r {
                        let ys = &y[i * c..(i + 1) * c];
                        let gs = &g[i * c..(i + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let (r, c) = as_matrix(&node.shape);
                let y = &node.value;
                acc(*a, &|ga| {
                    for i in 0..r {
                        let ys = &y[i * c..(i + 1) * c];
                        let gs = &g[i * c..(i + 1) * c];
                        let mean_g = gs.iter().sum::<f64>() / c as f64;
                        let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            ga[i * c + j] += inv_std[i] * (gs[j] - mean_g - ys[j] * mean_gy);
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &|ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(a, &|ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::Square(a) => {
                let av = self.value(a);
                acc(a, &|ga| {
                    for ((o, x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * v * x;
                    }
                });
            }
            &Op::Sqrt(a) => {
                let y = &node.value;
                acc(a, &|ga| {
                    for ((o, x), &v) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *o += x / (2.0 * v);
                    }
                });
            }
            Op::Concat(parts) => {
                let (r, total) = as_matrix(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = as_matrix(self.shape(p)).1;
                    acc(p, &|gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let (r, w) = as_matrix(&node.shape);
                let c = as_matrix(self.shape(a)).1;
                acc(a, &|ga| {
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            &Op::SliceRows { a, start } => {
                let c = as_matrix(self.shape(a)).1;
                acc(a, &|ga| {
                    for (o, x) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                let c = mask.len();
                acc(*a, &|ga| {
                    for (idx, (o, x)) in ga.iter_mut().zip(g).enumerate() {
                        if !mask[idx % c] {
                            *o += x;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = as_matrix(self.shape(*table)).1;
                acc(*table, &|gt| {
                    for (row, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for j in 0..d {
                                gt[id * d + j] += g[row * d + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.shape(out), &[2, 1]);
        assert_eq!(g.value(out), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn masked_fill_then_softmax() {
        // softmax([5, -1e9]) = [1/(1+e^(-1e9-5)), ...] = [1, 0] to double precision
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![5.0, 7.0]).unwrap();
        let m = g.masked_fill(x, &[false, true], -1e9).unwrap();
        let y = g.softmax(m).unwrap();
        assert!(close(g.value(y), &[1.0, 0.0], 1e-6));
        assert_eq!(g.value(y)[1], 0.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&[1], vec![3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.variable(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let root = g.mean(x).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        let c = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(&[1], vec![1e300]).unwrap();
        let b = g.constant(&[1], vec![1e300]).unwrap();
        assert!(matches!(g.mul(a, b), Err(Error::NonFinite { op: "mul" })));
        assert!(g.constant(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn bias_and_column_broadcast() {
        let mut g = Graph::new();
        let m = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bias = g.constant(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let col = g.constant(&[2, 1], vec![2.0, 3.0]).unwrap();
        let s = g.add(m, bias).unwrap();
        assert_eq!(g.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let p = g.mul(m, col).unwrap();
        assert_eq!(g.value(p), &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
        let a = g.scale(x, 3.0).unwrap();
        let b = g.add(a, x).unwrap();
        let root = g.sum(b).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn unordered_matmul_ignores_inner_order() {
        let mut g = Graph::new();
        let a = g.constant(&[1, 4], vec![0.1, 1e8, -1e8, 0.3]).unwrap();
        let b = g.constant(&[4, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let a2 = g.constant(&[1, 4], vec![-1e8, 0.3, 0.1, 1e8]).unwrap();
        let x = g.matmul_unordered(a, b).unwrap();
        let y = g.matmul_unordered(a2, b).unwrap();
        assert_eq!(g.value(x)[0].to_bits(), g.value(y)[0].to_bits());
    }

    #[test]
    fn gather_padding_row_is_zero_and_gradient_free() {
        let mut g = Graph::new();
        let t = g.variable(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rows = g.gather_rows(t, &[Some(1), None, Some(1)]).unwrap();
        assert_eq!(g.value(rows), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let root = g.sum(rows).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(t).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather_rows(t, &[Some(2)]).is_err());
    }
}
