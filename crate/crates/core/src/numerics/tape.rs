//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records operations in evaluation order. Parameters are read
//! by reference from a [`ParamStore`]; everything else lives on the tape.
//! [`Tape::backward`] takes one or more seed gradients, so a loss that is
//! split across several tapes can be stitched together by the caller.

use super::matrix::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};
use super::params::{Grads, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(usize),
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<(usize, usize)>),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>, Matrix),
    PairwiseSqDist(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Matrix>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a reverse sweep: parameter gradients plus gradients of any
/// tape inputs created with [`Tape::input`].
pub struct Backward {
    pub params: Option<Grads>,
    node_grads: Vec<Option<Matrix>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.node_grads[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    /// A tape with no parameters; only [`Tape::input`] leaves carry gradients.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: None,
            nodes: Vec::with_capacity(64),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(i), _) => self.params.expect("param on detached tape").value(*i),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    /// Parameter leaf by name. Panics on unknown names; callers build the
    /// store and the graph from the same layout.
    pub fn param(&mut self, name: &str) -> Var {
        let store = self.params.expect("param on detached tape");
        let i = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(i),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, false)
    }

    /// A leaf whose gradient is reported by [`Backward::grad`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul shape");
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_into(va, vb, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    /// `a + row`, broadcasting a 1xC row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!((1, va.cols()), vr.shape(), "add_row shape");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(Op::AddScalar(a), out, ng)
    }

    /// `a * s` for a 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(Op::ScaleBy(a, s), out, ng)
    }

    /// `a / s` for a 1x1 node `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v / sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(Op::DivBy(a, s), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(a);
        self.push(Op::Relu(a), out, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), out, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(Op::Softplus(a), out, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(Op::Exp(a), out, ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(Op::Ln(a), out, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(Op::Square(a), out, ng)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        let ng = self.ng(a);
        self.push(Op::Powf(a, p), out, ng)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|v| v.max(lo));
        let ng = self.ng(a);
        self.push(Op::ClampMin(a, lo), out, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), out, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(Op::Mean(a), out, ng)
    }

    /// Row sums as an Nx1 column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(va.rows(), 1, data).expect("row_sum");
        let ng = self.ng(a);
        self.push(Op::RowSum(a), out, ng)
    }

    /// Column-wise mean over rows, 1xC.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let n = va.rows() as f64;
        for o in out.data_mut() {
            *o /= n;
        }
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), out, ng)
    }

    /// Column-wise max over rows, 1xC; first maximal row wins ties.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::filled(1, va.cols(), f64::NEG_INFINITY);
        let mut arg = vec![0usize; va.cols()];
        for r in 0..va.rows() {
            for (c, &v) in va.row(r).iter().enumerate() {
                if v > out.data()[c] {
                    out.data_mut()[c] = v;
                    arg[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::MaxRows(a, arg), out, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        let ng = self.ng(a);
        self.push(Op::SliceRows(a, start), out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols rows");
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows cols");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat_rows");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, ng)
    }

    /// Picks entries `(row, col)` into a 1xL row.
    pub fn gather(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = at.iter().map(|&(r, c)| va.get(r, c)).collect();
        let out = Matrix::row_vector(&data);
        let ng = self.ng(a);
        self.push(Op::Gather(a, at), out, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let va = self.value(logits);
        assert_eq!(va.rows(), labels.len(), "cross_entropy labels");
        let probs = softmax_rows(va);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = va.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Matrix::scalar(total / labels.len() as f64);
        let ng = self.ng(logits);
        self.push(Op::CrossEntropy(logits, labels.to_vec(), probs), out, ng)
    }

    /// Squared Euclidean distances between all row pairs.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let out = pairwise_sq_dist(self.value(a));
        let ng = self.ng(a);
        self.push(Op::PairwiseSqDist(a), out, ng)
    }

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Backward {
        let n = self.nodes.len();
        let mut g: Vec<Option<Matrix>> = vec![None; n];
        for (v, s) in seeds {
            assert_eq!(self.value(*v).shape(), s.shape(), "seed shape");
            acc(&mut g[v.0], s);
        }
        let mut params = self.params.map(ParamStore::zeros_like);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            match &node.op {
                Op::Param(p) => {
                    if let Some(ps) = params.as_mut() {
                        ps.get_mut(*p).add_assign(&gi);
                    }
                }
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let vb = self.value(*b);
                        let mut ga = Matrix::zeros(gi.rows(), vb.rows());
                        matmul_nt_into(&gi, vb, &mut ga);
                        acc_owned(&mut g[a.0], ga);
                    }
                    if self.ng(*b) {
                        let va = self.value(*a);
                        let mut gb = Matrix::zeros(va.cols(), gi.cols());
                        matmul_tn_into(va, &gi, &mut gb);
                        acc_owned(&mut g[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut g[a.0], &gi);
                    }
                    if self.ng(*b) {
                        acc(&mut g[b.0], &gi);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut g[a.0], &gi);
                    }
                    if self.ng(*b) {
                        acc_owned(&mut g[b.0], gi.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc_owned(&mut g[a.0], gi.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        acc_owned(&mut g[b.0], gi.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        let mut gr = Matrix::zeros(1, gi.cols());
                        for row in 0..gi.rows() {
                            for (o, v) in gr.data_mut().iter_mut().zip(gi.row(row)) {
                                *o += v;
                            }
                        }
                        acc_owned(&mut g[r.0], gr);
                    }
                    if self.ng(*a) {
                        acc_owned(&mut g[a.0], gi);
                    }
                }
                Op::Scale(a, s) => acc_owned(&mut g[a.0], gi.scale(*s)),
                Op::AddScalar(a) => acc_owned(&mut g[a.0], gi),
                Op::ScaleBy(a, s) => {
                    let sv = self.value(*s).item();
                    if self.ng(*s) {
                        let d: f64 = gi
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(x, y)| x * y)
                            .sum();
                        acc_owned(&mut g[s.0], Matrix::scalar(d));
                    }
                    if self.ng(*a) {
                        acc_owned(&mut g[a.0], gi.scale(sv));
                    }
                }
                Op::DivBy(a, s) => {
                    let sv = self.value(*s).item();
                    if self.ng(*s) {
                        let d: f64 = gi
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(x, y)| x * y)
                            .sum();
                        acc_owned(&mut g[s.0], Matrix::scalar(-d / (sv * sv)));
                    }
                    if self.ng(*a) {
                        acc_owned(&mut g[a.0], gi.scale(1.0 / sv));
                    }
                }
                Op::Relu(a) => {
                    let ga = gi.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc_owned(&mut g[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc_owned(&mut g[a.0], gi.zip_map(y, |g, y| g * y * (1.0 - y)));
                }
                Op::Softplus(a) => {
                    let ga = gi.zip_map(self.value(*a), |g, x| g * sigmoid(x));
                    acc_owned(&mut g[a.0], ga);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc_owned(&mut g[a.0], gi.zip_map(y, |g, y| g * y));
                }
                Op::Ln(a) => {
                    acc_owned(&mut g[a.0], gi.zip_map(self.value(*a), |g, x| g / x));
                }
                Op::Square(a) => {
                    acc_owned(&mut g[a.0], gi.zip_map(self.value(*a), |g, x| 2.0 * g * x));
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga = gi.zip_map(self.value(*a), |g, x| g * p * x.powf(p - 1.0));
                    acc_owned(&mut g[a.0], ga);
                }
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    let ga = gi.zip_map(self.value(*a), |g, x| if x >= lo { g } else { 0.0 });
                    acc_owned(&mut g[a.0], ga);
                }
                Op::Transpose(a) => acc_owned(&mut g[a.0], gi.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc_owned(&mut g[a.0], Matrix::filled(r, c, gi.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = gi.item() / (r * c) as f64;
                    acc_owned(&mut g[a.0], Matrix::filled(r, c, v));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for row in 0..r {
                        let v = gi.get(row, 0);
                        ga.row_mut(row).iter_mut().for_each(|x| *x = v);
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let inv = 1.0 / r as f64;
                    for row in 0..r {
                        for (o, v) in ga.row_mut(row).iter_mut().zip(gi.data()) {
                            *o = v * inv;
                        }
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::MaxRows(a, arg) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (col, &row) in arg.iter().enumerate() {
                        ga.set(row, col, gi.data()[col]);
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let off = start * c;
                    ga.data_mut()[off..off + gi.len()].copy_from_slice(gi.data());
                    acc_owned(&mut g[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        if self.ng(*p) {
                            let mut gp = Matrix::zeros(r, c);
                            for row in 0..r {
                                gp.row_mut(row).copy_from_slice(&gi.row(row)[off..off + c]);
                            }
                            acc_owned(&mut g[p.0], gp);
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        if self.ng(*p) {
                            let gp = gi.slice_rows(off, off + r);
                            debug_assert_eq!(gp.cols(), c);
                            acc_owned(&mut g[p.0], gp);
                        }
                        off += r;
                    }
                }
                Op::Gather(a, at) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        let cur = ga.get(i, j);
                        ga.set(i, j, cur + gi.data()[k]);
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::CrossEntropy(a, labels, probs) => {
                    let scale = gi.item() / labels.len() as f64;
                    let mut ga = probs.scale(scale);
                    for (r, &y) in labels.iter().enumerate() {
                        let cur = ga.get(r, y);
                        ga.set(r, y, cur - scale);
                    }
                    acc_owned(&mut g[a.0], ga);
                }
                Op::PairwiseSqDist(a) => {
                    let va = self.value(*a);
                    let (n, d) = va.shape();
                    let mut ga = Matrix::zeros(n, d);
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * (gi.get(i, j) + gi.get(j, i));
                            if w == 0.0 {
                                continue;
                            }
                            let (ri, rj) = (va.row(i), va.row(j));
                            let gr = ga.row_mut(i);
                            for k in 0..d {
                                gr[k] += w * (ri[k] - rj[k]);
                            }
                        }
                    }
                    acc_owned(&mut g[a.0], ga);
                }
            }
        }
        Backward {
            params,
            node_grads: g,
        }
    }
}

fn acc(slot: &mut Option<Matrix>, m: &Matrix) {
    match slot {
        Some(s) => s.add_assign(m),
        None => *slot = Some(m.clone()),
    }
}

fn acc_owned(slot: &mut Option<Matrix>, m: Matrix) {
    match slot {
        Some(s) => s.add_assign(&m),
        None => *slot = Some(m),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn pairwise_sq_dist(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}
