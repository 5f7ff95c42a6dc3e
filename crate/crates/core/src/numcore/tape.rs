//! Array-level reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations on [`Array`] values. Calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! accumulates adjoints; [`Tape::param_grads`] then reports the gradient of
//! every named parameter leaf.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Huber(f64),
    Squared,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x * w^T`, the layout of every linear layer.
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<Vec<usize>>),
    RowScale(Var, Rc<Vec<f64>>),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    SegmentWeightedSum(Var, Var, Rc<Vec<usize>>),
    Sum(Var),
    Loss {
        pred: Var,
        target: Rc<Vec<f64>>,
        weight: Rc<Vec<f64>>,
        kind: LossKind,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Primitive-operation and multiply-accumulate counts recorded by a tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub ops: u64,
    pub macs: u64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    adjoints: Vec<Option<Array>>,
    count: OpCount,
}

pub fn huber(pred: f64, target: f64, delta: f64) -> f64 {
    let r = (pred - target).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_count(&self) -> OpCount {
        self.count
    }

    fn push(&mut self, value: Array, op: Op, macs: usize) -> Var {
        if !matches!(op, Op::Leaf) {
            self.count.ops += 1;
            self.count.macs += macs as u64;
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, 0)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Array) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, 0);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.rows(), "matmul {:?} x {:?}", x.shape(), y.shape());
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        let mut out = Array::zeros(n, m);
        for r in 0..n {
            let xr = x.row_slice(r);
            let orow = out.row_slice_mut(r);
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, yv) in orow.iter_mut().zip(y.row_slice(i)) {
                    *o += xv * yv;
                }
            }
        }
        self.push(out, Op::MatMul(a, b), n * k * m)
    }

    /// `x * w^T` with `w` shaped `(out, in)`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.cols(), "matmul_t {:?} x {:?}^T", xv.shape(), wv.shape());
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = Array::zeros(n, m);
        for r in 0..n {
            let xr = xv.row_slice(r);
            let orow = out.row_slice_mut(r);
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = dot(xr, wv.row_slice(o));
            }
        }
        self.push(out, Op::MatMulT(x, w), n * k * m)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        let n = out.len();
        self.push(out, Op::Add(a, b), n)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), b.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let n = out.len();
        self.push(out, Op::AddRow(a, row), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Array::from_vec(x.rows(), x.cols(), data);
        let n = out.len();
        self.push(out, Op::Mul(a, b), n)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Array::from_vec(x.rows(), x.cols(), x.data().iter().map(|v| v * c).collect());
        let n = out.len();
        self.push(out, Op::Scale(a, c), n)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Array::from_vec(x.rows(), x.cols(), x.data().iter().map(|v| v + c).collect());
        let n = out.len();
        self.push(out, Op::AddScalar(a), n)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Array::from_vec(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect());
        let n = out.len();
        self.push(out, op, n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Column-wise concatenation of arrays with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Array::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + v.cols()].copy_from_slice(v.row_slice(r));
            }
            off += v.cols();
        }
        let n = out.len();
        self.push(out, Op::Concat(parts.to_vec()), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols(), "slice out of range");
        let mut out = Array::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_slice_mut(r).copy_from_slice(&x.row_slice(r)[start..end]);
        }
        let n = out.len();
        self.push(out, Op::SliceCols(a, start), n)
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Array::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(x.row_slice(i));
        }
        let n = out.len();
        self.push(out, Op::Gather(a, idx), n)
    }

    /// Multiplies row `r` of `a` by the constant `w[r]`.
    pub fn row_scale(&mut self, a: Var, w: Rc<Vec<f64>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), w.len(), "row_scale length mismatch");
        let mut out = x.clone();
        for (r, &s) in w.iter().enumerate() {
            out.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let n = out.len();
        self.push(out, Op::RowScale(a, w), n)
    }

    /// Softmax of a column over each row segment `offsets[g]..offsets[g+1]`.
    pub fn segment_softmax(&mut self, scores: Var, offsets: Rc<Vec<usize>>) -> Var {
        let x = self.value(scores);
        assert_eq!(x.cols(), 1, "segment_softmax expects a column");
        assert_eq!(*offsets.last().unwrap(), x.rows(), "segments must cover all rows");
        let mut out = Array::zeros(x.rows(), 1);
        for g in offsets.windows(2) {
            let seg = &x.data()[g[0]..g[1]];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = seg.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (i, e) in exps.into_iter().enumerate() {
                out.data_mut()[g[0] + i] = e / total;
            }
        }
        let n = out.len();
        self.push(out, Op::SegmentSoftmax(scores, offsets), n)
    }

    /// Per segment `g`: `sum_r weights[r] * values[r, :]`. Empty segments give zero rows.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, offsets: Rc<Vec<usize>>) -> Var {
        let (w, v) = (self.value(weights), self.value(values));
        assert_eq!(w.shape(), (v.rows(), 1), "segment weights must be a column");
        assert_eq!(*offsets.last().unwrap(), v.rows(), "segments must cover all rows");
        let groups = offsets.len() - 1;
        let mut out = Array::zeros(groups, v.cols());
        for g in 0..groups {
            let orow = out.row_slice_mut(g);
            for r in offsets[g]..offsets[g + 1] {
                let a = w.data()[r];
                for (o, x) in orow.iter_mut().zip(v.row_slice(r)) {
                    *o += a * x;
                }
            }
        }
        let macs = v.len();
        self.push(out, Op::SegmentWeightedSum(weights, values, offsets), macs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let s = x.data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(a), n)
    }

    /// Weighted mean loss `sum_i w_i l(pred_i - target_i) / sum_i w_i` over a column.
    pub fn loss(&mut self, pred: Var, target: Vec<f64>, weight: Option<Vec<f64>>, kind: LossKind) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), (target.len(), 1), "loss expects a prediction column");
        let weight = weight.unwrap_or_else(|| vec![1.0; target.len()]);
        assert_eq!(weight.len(), target.len());
        let total_w: f64 = weight.iter().sum();
        let mut acc = 0.0;
        for i in 0..target.len() {
            let r = p.data()[i] - target[i];
            let l = match kind {
                LossKind::Huber(d) => huber(r, 0.0, d),
                LossKind::Squared => r * r,
            };
            acc += weight[i] * l;
        }
        let value = if total_w > 0.0 { acc / total_w } else { 0.0 };
        let n = target.len();
        self.push(
            Array::scalar(value),
            Op::Loss {
                pred,
                target: Rc::new(target),
                weight: Rc::new(weight),
                kind,
            },
            n,
        )
    }

    /// Reverse pass from a scalar root. Replaces any earlier adjoints.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got {:?}",
                rv.shape()
            )));
        }
        if !rv.is_finite() {
            return Err(Error::invalid("backward root is not finite"));
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        self.adjoints = adj;
        Ok(())
    }

    pub fn grad_of(&self, v: Var) -> Option<&Array> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Gradient of every registered parameter (zeros if unreachable).
    pub fn param_grads(&self) -> BTreeMap<String, Array> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad_of(v)
                    .cloned()
                    .unwrap_or_else(|| {
                        let s = self.value(v);
                        Array::zeros(s.rows(), s.cols())
                    });
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                // dA = G * B^T ; dB = A^T * G
                let mut da = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.row_slice(r);
                    for (k, slot) in da.row_slice_mut(r).iter_mut().enumerate() {
                        *slot = dot(gr, y.row_slice(k));
                    }
                }
                let mut db = Array::zeros(y.rows(), y.cols());
                for r in 0..x.rows() {
                    let gr = g.row_slice(r);
                    for (k, &xv) in x.row_slice(r).iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        axpy(xv, gr, db.row_slice_mut(k));
                    }
                }
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::MatMulT(xv, wv) => {
                let (x, w) = (self.value(*xv), self.value(*wv));
                let mut dx = Array::zeros(x.rows(), x.cols());
                let mut dw = Array::zeros(w.rows(), w.cols());
                for r in 0..x.rows() {
                    let gr = g.row_slice(r);
                    let xr = x.row_slice(r);
                    let dxr = dx.row_slice_mut(r);
                    for (o, &go) in gr.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        axpy(go, w.row_slice(o), dxr);
                        axpy(go, xr, dw.row_slice_mut(o));
                    }
                }
                accumulate(adj, *xv, dx);
                accumulate(adj, *wv, dw);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut db = Array::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, gv) in db.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *d += gv;
                    }
                }
                accumulate(adj, *a, g.clone());
                accumulate(adj, *row, db);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = zip_map(g, y, |p, q| p * q);
                let db = zip_map(g, x, |p, q| p * q);
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(adj, *a, map(g, |v| v * c));
            }
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Tanh(a) => accumulate(adj, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let x = self.value(*a);
                accumulate(adj, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
            }
            Op::Sigmoid(a) => accumulate(adj, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut d = Array::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + cols]);
                    }
                    off += cols;
                    accumulate(adj, p, d);
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                accumulate(adj, *a, d);
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    axpy(1.0, g.row_slice(r), d.row_slice_mut(src));
                }
                accumulate(adj, *a, d);
            }
            Op::RowScale(a, w) => {
                let mut d = g.clone();
                for (r, &s) in w.iter().enumerate() {
                    d.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                accumulate(adj, *a, d);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = Array::zeros(out.rows(), 1);
                for seg in offsets.windows(2) {
                    let (s, e) = (seg[0], seg[1]);
                    let inner: f64 = (s..e).map(|r| out.data()[r] * g.data()[r]).sum();
                    for r in s..e {
                        d.data_mut()[r] = out.data()[r] * (g.data()[r] - inner);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SegmentWeightedSum(wv, vv, offsets) => {
                let (w, v) = (self.value(*wv), self.value(*vv));
                let mut dw = Array::zeros(w.rows(), 1);
                let mut dv = Array::zeros(v.rows(), v.cols());
                for grp in 0..offsets.len() - 1 {
                    let gr = g.row_slice(grp);
                    for r in offsets[grp]..offsets[grp + 1] {
                        dw.data_mut()[r] = dot(gr, v.row_slice(r));
                        axpy(w.data()[r], gr, dv.row_slice_mut(r));
                    }
                }
                accumulate(adj, *wv, dw);
                accumulate(adj, *vv, dv);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                d.fill(g.item());
                accumulate(adj, *a, d);
            }
            Op::Loss {
                pred,
                target,
                weight,
                kind,
            } => {
                let p = self.value(*pred);
                let total_w: f64 = weight.iter().sum();
                let scale = if total_w > 0.0 { g.item() / total_w } else { 0.0 };
                let d = (0..target.len())
                    .map(|i| {
                        let r = p.data()[i] - target[i];
                        let dl = match kind {
                            LossKind::Huber(delta) => huber_grad(r, *delta),
                            LossKind::Squared => 2.0 * r,
                        };
                        scale * weight[i] * dl
                    })
                    .collect();
                accumulate(adj, *pred, Array::column(d));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_vec(a.rows(), a.cols(), a.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(adj: &mut [Option<Array>], v: Var, d: Array) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}
