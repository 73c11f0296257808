//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to propagate gradients. [`Graph::backward`] walks
//! the tape once in reverse. Everything is a 2-D matrix; scalars are 1×1.

mod attention;
pub mod check;

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::kg::Adjacency;

pub use attention::{GatSaved, GroupAttnSaved};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Elu,
    Relu,
    Tanh,
    Exp,
    Log,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    Pick(Var, Arc<[(usize, usize)]>),
    Unary(Var, Unary),
    RowNormalize(Var),
    SoftmaxRows(Var),
    MaskedLogSoftmax(Var, Arc<Array2<bool>>),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    LogAddExp(Var, Var),
    Gat(Var, Var, Var, Box<GatSaved>),
    GroupAttn(Var, Var, Var, Box<GroupAttnSaved>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | AddRow(a, b) | Mul(a, b)
            | MulScalar(a, b) | LogAddExp(a, b) => vec![*a, *b],
            Scale(a, _) | SliceCols(a, _) | Reshape(a) | GatherRows(a, _) | Pick(a, _) | Unary(a, _)
            | RowNormalize(a) | SoftmaxRows(a) | MaskedLogSoftmax(a, _) | Sum(a) | Mean(a)
            | LogSumExp(a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Gat(a, b, c, _) | GroupAttn(a, b, c, _) => vec![*a, *b, *c],
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Numerical floor inside the row norm, keeping zero rows differentiable.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Add a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n bias");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiply `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let out = self.value(a) * c;
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape: element count mismatch");
        self.push(out, Op::Reshape(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(out, Op::GatherRows(a, idx.into()))
    }

    /// Pick single entries into a k×1 column.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let out = Array2::from_shape_fn((entries.len(), 1), |(k, _)| x[entries[k]]);
        self.push(out, Op::Pick(a, entries.into()))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let out = match f {
            Unary::Elu => x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Unary::Relu => x.mapv(|v| v.max(0.0)),
            Unary::Tanh => x.mapv(f64::tanh),
            Unary::Exp => x.mapv(f64::exp),
            Unary::Log => x.mapv(f64::ln),
        };
        self.push(out, Op::Unary(a, f))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Scale each row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = (row.dot(&row) + NORM_EPS).sqrt();
            row /= n;
        }
        self.push(out, Op::RowNormalize(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked
    /// entries are set to zero and receive no gradient. Every row needs at
    /// least one unmasked entry.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "mask shape must match logits");
        let mut out = Array2::zeros(x.dim());
        for ((xr, mr), mut orow) in x.axis_iter(Axis(0)).zip(mask.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
            assert!(mr.iter().any(|&k| k), "masked_log_softmax: a row has no candidates");
            let m = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, k)| **k)
                .fold(f64::NEG_INFINITY, |m, (v, _)| if m.is_nan() || v.is_nan() { f64::NAN } else { m.max(*v) });
            let z: f64 = xr.iter().zip(mr.iter()).filter(|(_, k)| **k).map(|(v, _)| (v - m).exp()).sum();
            let lse = m + z.ln();
            for ((o, v), k) in orow.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if *k {
                    *o = v - lse;
                }
            }
        }
        self.push(out, Op::MaskedLogSoftmax(a, mask))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// log Σ exp over all entries.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(Array2::from_elem((1, 1), lse), Op::LogSumExp(a))
    }

    /// Elementwise log(exp(a) + exp(b)).
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).to_owned();
        Zip::from(&mut out).and(self.value(b)).for_each(|x, &y| {
            let m = x.max(y);
            *x = m + ((*x - m).exp() + (y - m).exp()).ln();
        });
        self.push(out, Op::LogAddExp(a, b))
    }

    /// Graph attention aggregation over `adj`.
    ///
    /// `h` is N×d; `src` and `dst` are N×1 attention scores. The logit of
    /// edge (i, j) is leakyReLU(src_i + dst_j), normalized by softmax over
    /// the neighbors of i; row i of the output is the weighted sum of h_j.
    pub fn gat_aggregate(&mut self, h: Var, src: Var, dst: Var, adj: Arc<Adjacency>, slope: f64) -> Var {
        let (out, saved) = attention::gat_forward(self.value(h), self.value(src), self.value(dst), adj, slope);
        self.push(out, Op::Gat(h, src, dst, Box::new(saved)))
    }

    /// Scaled dot-product attention within fixed-size groups of rows.
    ///
    /// `q` holds `groups · q_len` rows and `k`, `v` hold `groups · kv_len`
    /// rows; each has `heads · head_dim` columns. Query rows of group g only
    /// attend to key rows of group g, independently per head.
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, q_len: usize, kv_len: usize, heads: usize) -> Var {
        let (out, saved) =
            attention::group_attention_forward(self.value(q), self.value(k), self.value(v), q_len, kv_len, heads);
        self.push(out, Op::GroupAttn(q, k, v, Box::new(saved)))
    }

    /// Gradients of `root` (usually 1×1) with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(val(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::MulScalar(a, s) => {
                let c = val(*s)[[0, 0]];
                if self.wants(*a) {
                    accumulate(grads, *a, g * c);
                }
                if self.wants(*s) {
                    let d = (g * val(*a)).sum();
                    accumulate(grads, *s, Array2::from_elem((1, 1), d));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.wants(*p) {
                        accumulate(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if self.wants(*p) {
                        accumulate(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut full = Array2::zeros(val(*a).dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, full);
            }
            Op::Reshape(a) => {
                let shape = val(*a).dim();
                let r = g.as_standard_layout().into_owned().into_shape_with_order(shape).unwrap();
                accumulate(grads, *a, r);
            }
            Op::GatherRows(a, idx) => {
                let mut full = Array2::zeros(val(*a).dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = full.row_mut(i);
                    row += &g.row(k);
                }
                accumulate(grads, *a, full);
            }
            Op::Pick(a, entries) => {
                let mut full = Array2::zeros(val(*a).dim());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    full[[r, c]] += g[[k, 0]];
                }
                accumulate(grads, *a, full);
            }
            Op::Unary(a, f) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = g.clone();
                match f {
                    Unary::Elu => Zip::from(&mut d).and(x).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= x.exp();
                        }
                    }),
                    Unary::Relu => Zip::from(&mut d).and(x).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }),
                    Unary::Tanh => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y),
                    Unary::Exp => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y),
                    Unary::Log => Zip::from(&mut d).and(x).for_each(|d, &x| *d /= x),
                }
                accumulate(grads, *a, d);
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let mut d = Array2::zeros(x.dim());
                for ((xr, gr), mut dr) in x.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))).zip(d.axis_iter_mut(Axis(0))) {
                    let n2 = xr.dot(&xr) + NORM_EPS;
                    let n = n2.sqrt();
                    let xg = xr.dot(&gr);
                    Zip::from(&mut dr).and(&xr).and(&gr).for_each(|d, &x, &g| {
                        *d = g / n - x * xg / (n2 * n);
                    });
                }
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut dr, yr) in d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let s = dr.sum();
                    Zip::from(&mut dr).and(&yr).for_each(|d, &y| *d -= y * s);
                }
                accumulate(grads, *a, d);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for (((mut dr, yr), gr), mr) in d
                    .axis_iter_mut(Axis(0))
                    .zip(y.axis_iter(Axis(0)))
                    .zip(g.axis_iter(Axis(0)))
                    .zip(mask.axis_iter(Axis(0)))
                {
                    let gs: f64 = gr.iter().zip(mr.iter()).filter(|(_, k)| **k).map(|(g, _)| g).sum();
                    for (((d, y), g), k) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()).zip(mr.iter()) {
                        if *k {
                            *d = g - y.exp() * gs;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => accumulate(grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let x = val(*a);
                accumulate(grads, *a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            Op::LogSumExp(a) => {
                let lse = node.value[[0, 0]];
                let gs = g[[0, 0]];
                accumulate(grads, *a, val(*a).mapv(|v| gs * (v - lse).exp()));
            }
            Op::LogAddExp(a, b) => {
                let y = &node.value;
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).and(y).for_each(|d, &x, &y| *d *= (x - y).exp());
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*b)).and(y).for_each(|d, &x, &y| *d *= (x - y).exp());
                    accumulate(grads, *b, d);
                }
            }
            Op::Gat(h, src, dst, saved) => {
                let (dh, ds, dd) = attention::gat_backward(g, val(*h), val(*src), val(*dst), saved);
                if self.wants(*h) {
                    accumulate(grads, *h, dh);
                }
                if self.wants(*src) {
                    accumulate(grads, *src, ds);
                }
                if self.wants(*dst) {
                    accumulate(grads, *dst, dd);
                }
            }
            Op::GroupAttn(q, k, v, saved) => {
                let (dq, dk, dv) = attention::group_attention_backward(g, val(*q), val(*k), val(*v), saved);
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
    }
}
