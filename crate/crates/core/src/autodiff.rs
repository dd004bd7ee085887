//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly (values are computed on
//! construction) and [`Tape::backward`] walks the record in reverse. Only the
//! operations the encoder and losses need are provided; graph message passing
//! is expressed with row gathers, scatter-adds and segment softmaxes.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    ScaleRows(Var, Rc<Vec<f64>>),
    ScaleCols(Var, Rc<Vec<f64>>),
    MulCol(Var, Var),
    RowDot(Var, Var),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    EdgeDot(Var, Var, Rc<EdgeIndex>, f64),
    EdgeAggregate(Var, Var, Rc<EdgeIndex>),
    Elu(Var),
    LogSigmoid(Var),
    L2NormalizeRows(Var),
    Transpose(Var),
    LogSumExpRows(Var),
    AddConst(Var),
    Diag(Var),
    MeanRows(Var),
    SumAll(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const NORM_EPS: f64 = 1e-12;

/// Directed edges `target <- neighbor` with a constant coefficient each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeIndex {
    pub targets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub coef: Vec<f64>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn contiguous(m: &Mat) -> Cow<'_, [f64]> {
    match m.as_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(m.iter().copied().collect()),
    }
}

fn gather_rows(m: &Mat, idx: &[usize]) -> Mat {
    let d = m.ncols();
    let src = contiguous(m);
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Mat::from_shape_vec((idx.len(), d), out).unwrap()
}

fn scatter_rows(m: &Mat, idx: &[usize], n: usize) -> Mat {
    let d = m.ncols();
    let src = contiguous(m);
    let mut out = vec![0.0; n * d];
    for (r, &t) in idx.iter().enumerate() {
        for (o, s) in out[t * d..(t + 1) * d].iter_mut().zip(&src[r * d..(r + 1) * d]) {
            *o += s;
        }
    }
    Mat::from_shape_vec((n, d), out).unwrap()
}

/// Row `r` of `m` times `s[r]`.
fn scale_rows_by(m: &Mat, s: &[f64]) -> Mat {
    let d = m.ncols();
    let src = contiguous(m);
    let mut out = Vec::with_capacity(src.len());
    for (row, &k) in src.chunks_exact(d.max(1)).zip(s) {
        out.extend(row.iter().map(|v| v * k));
    }
    out.resize(m.len(), 0.0);
    Mat::from_shape_vec(m.dim(), out).unwrap()
}

fn row_dots(a: &Mat, b: &Mat) -> Mat {
    let d = a.ncols();
    let (x, y) = (contiguous(a), contiguous(b));
    let v: Vec<f64> = if d == 0 {
        vec![0.0; a.nrows()]
    } else {
        x.chunks_exact(d).zip(y.chunks_exact(d)).map(|(p, q)| p.iter().zip(q).map(|(u, w)| u * w).sum()).collect()
    };
    Mat::from_shape_vec((a.nrows(), 1), v).unwrap()
}

fn column(m: &Mat) -> Cow<'_, [f64]> {
    contiguous(m)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf registered on the tape, by name.
    /// Parameters that did not influence the output get zeros.
    pub fn by_param<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (&'a str, Mat)> + 'a {
        self.params.iter().map(move |(name, &v)| {
            let g = self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(tape.value(v).dim()));
            (name.as_str(), g)
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf. Registering the same name twice returns the first leaf.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a` (n x d) plus the row vector `b` (1 x d) on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = self.value(a) * &m;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, m), ng)
    }

    /// Scales row `i` by the constant `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Rc<Vec<f64>>) -> Var {
        let v = scale_rows_by(self.value(a), &w);
        let ng = self.ng(a);
        self.push(v, Op::ScaleRows(a, w), ng)
    }

    /// Scales column `k` by the constant `m[k]`.
    pub fn scale_cols(&mut self, a: Var, m: Rc<Vec<f64>>) -> Var {
        let mut v = self.value(a).clone();
        for (mut col, &mk) in v.columns_mut().into_iter().zip(m.iter()) {
            col *= mk;
        }
        let ng = self.ng(a);
        self.push(v, Op::ScaleCols(a, m), ng)
    }

    /// `a` (n x d) with row `i` multiplied by `s[i, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let v = scale_rows_by(self.value(a), &column(self.value(s)));
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulCol(a, s), ng)
    }

    /// Row-wise inner products, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let v = row_dots(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::RowDot(a, b), ng)
    }

    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = gather_rows(self.value(a), &idx);
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, idx), ng)
    }

    /// Output row `idx[i]` accumulates input row `i`; the output has `n` rows.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let v = scatter_rows(self.value(a), &idx, n);
        let ng = self.ng(a);
        self.push(v, Op::ScatterAdd(a, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).ncols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).ncols(), d, "column counts agree");
            data.extend_from_slice(&contiguous(self.value(p)));
        }
        let v = Mat::from_shape_vec((data.len() / d.max(1), d), data).unwrap();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    /// Softmax of an `e x 1` score column within groups given by `group[i]`.
    pub fn segment_softmax(&mut self, a: Var, group: Rc<Vec<usize>>, n_groups: usize) -> Var {
        let x = self.value(a);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (i, &g) in group.iter().enumerate() {
            max[g] = max[g].max(x[[i, 0]]);
        }
        let mut sum = vec![0.0; n_groups];
        let mut v = Mat::zeros(x.dim());
        for (i, &g) in group.iter().enumerate() {
            let e = (x[[i, 0]] - max[g]).exp();
            v[[i, 0]] = e;
            sum[g] += e;
        }
        for (i, &g) in group.iter().enumerate() {
            v[[i, 0]] /= sum[g];
        }
        let ng = self.ng(a);
        self.push(v, Op::SegmentSoftmax(a, group), ng)
    }

    /// Per-edge scores `scale * coef[e] * <q[target[e]], k[neighbor[e]]>`, `E x 1`.
    pub fn edge_dot(&mut self, q: Var, k: Var, edges: Rc<EdgeIndex>, scale: f64) -> Var {
        let d = self.value(q).ncols();
        assert_eq!(self.value(k).ncols(), d);
        let (qs, ks) = (contiguous(self.value(q)), contiguous(self.value(k)));
        let v: Vec<f64> = (0..edges.len())
            .map(|e| {
                let (t, n) = (edges.targets[e] * d, edges.neighbors[e] * d);
                let dot: f64 = qs[t..t + d].iter().zip(&ks[n..n + d]).map(|(a, b)| a * b).sum();
                scale * edges.coef[e] * dot
            })
            .collect();
        let v = Mat::from_shape_vec((edges.len(), 1), v).unwrap();
        let ng = self.ng(q) || self.ng(k);
        self.push(v, Op::EdgeDot(q, k, edges, scale), ng)
    }

    /// `out[target[e]] += a[e] * coef[e] * v[neighbor[e]]` over `n` output rows.
    pub fn edge_aggregate(&mut self, a: Var, v: Var, edges: Rc<EdgeIndex>, n: usize) -> Var {
        let d = self.value(v).ncols();
        let (av, vs) = (contiguous(self.value(a)), contiguous(self.value(v)));
        let mut out = vec![0.0; n * d];
        for e in 0..edges.len() {
            let (t, j) = (edges.targets[e] * d, edges.neighbors[e] * d);
            let c = av[e] * edges.coef[e];
            for (o, x) in out[t..t + d].iter_mut().zip(&vs[j..j + d]) {
                *o += c * x;
            }
        }
        let out = Mat::from_shape_vec((n, d), out).unwrap();
        let ng = self.ng(a) || self.ng(v);
        self.push(out, Op::EdgeAggregate(a, v, edges), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        let ng = self.ng(a);
        self.push(v, Op::Elu(a), ng)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        let ng = self.ng(a);
        self.push(v, Op::LogSigmoid(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row /= n;
        }
        let ng = self.ng(a);
        self.push(v, Op::L2NormalizeRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Row-wise log-sum-exp, `n x 1`. Entries equal to `-inf` contribute nothing.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |m, &y| m.max(y));
            v[[i, 0]] = if m == f64::NEG_INFINITY { m } else { m + row.fold(0.0, |s, &y| s + (y - m).exp()).ln() };
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    /// Adds a constant matrix (for example a `-inf` mask).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = self.value(a).diag().to_owned().insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::Diag(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones(self.value(out).dim()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MulConst(a, m) => acc(*a, g * m),
            Op::ScaleRows(a, w) => acc(*a, scale_rows_by(g, w)),
            Op::ScaleCols(a, m) => {
                let mut d = g.clone();
                for (mut col, &mk) in d.columns_mut().into_iter().zip(m.iter()) {
                    col *= mk;
                }
                acc(*a, d);
            }
            Op::MulCol(a, s) => {
                if self.ng(*a) {
                    acc(*a, scale_rows_by(g, &column(self.value(*s))));
                }
                if self.ng(*s) {
                    acc(*s, row_dots(g, self.value(*a)));
                }
            }
            Op::RowDot(a, b) => {
                let gc = column(g);
                if self.ng(*a) {
                    acc(*a, scale_rows_by(self.value(*b), &gc));
                }
                if self.ng(*b) {
                    acc(*b, scale_rows_by(self.value(*a), &gc));
                }
            }
            Op::Gather(a, idx) => acc(*a, scatter_rows(g, idx, self.value(*a).nrows())),
            Op::ScatterAdd(a, idx) => acc(*a, gather_rows(g, idx)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::SegmentSoftmax(a, group) => {
                let n_groups = group.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_groups];
                for (e, &grp) in group.iter().enumerate() {
                    dot[grp] += g[[e, 0]] * y[[e, 0]];
                }
                let mut d = Mat::zeros(y.dim());
                for (e, &grp) in group.iter().enumerate() {
                    d[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - dot[grp]);
                }
                acc(*a, d);
            }
            Op::EdgeDot(q, k, edges, scale) => {
                let d = self.value(*q).ncols();
                let gs = column(g);
                let (qs, ks) = (contiguous(self.value(*q)), contiguous(self.value(*k)));
                let (need_q, need_k) = (self.ng(*q), self.ng(*k));
                let mut dq = vec![0.0; if need_q { qs.len() } else { 0 }];
                let mut dk = vec![0.0; if need_k { ks.len() } else { 0 }];
                for e in 0..edges.len() {
                    let c = gs[e] * scale * edges.coef[e];
                    let (t, n) = (edges.targets[e] * d, edges.neighbors[e] * d);
                    if need_q {
                        for (o, x) in dq[t..t + d].iter_mut().zip(&ks[n..n + d]) {
                            *o += c * x;
                        }
                    }
                    if need_k {
                        for (o, x) in dk[n..n + d].iter_mut().zip(&qs[t..t + d]) {
                            *o += c * x;
                        }
                    }
                }
                if need_q {
                    acc(*q, Mat::from_shape_vec(self.value(*q).dim(), dq).unwrap());
                }
                if need_k {
                    acc(*k, Mat::from_shape_vec(self.value(*k).dim(), dk).unwrap());
                }
            }
            Op::EdgeAggregate(a, v, edges) => {
                let d = self.value(*v).ncols();
                let gs = contiguous(g);
                let (av, vs) = (contiguous(self.value(*a)), contiguous(self.value(*v)));
                let (need_a, need_v) = (self.ng(*a), self.ng(*v));
                let mut da = vec![0.0; if need_a { edges.len() } else { 0 }];
                let mut dv = vec![0.0; if need_v { vs.len() } else { 0 }];
                for e in 0..edges.len() {
                    let (t, j) = (edges.targets[e] * d, edges.neighbors[e] * d);
                    let grow = &gs[t..t + d];
                    if need_a {
                        da[e] = edges.coef[e] * grow.iter().zip(&vs[j..j + d]).map(|(x, y)| x * y).sum::<f64>();
                    }
                    if need_v {
                        let c = av[e] * edges.coef[e];
                        for (o, x) in dv[j..j + d].iter_mut().zip(grow) {
                            *o += c * x;
                        }
                    }
                }
                if need_a {
                    acc(*a, Mat::from_shape_vec((edges.len(), 1), da).unwrap());
                }
                if need_v {
                    acc(*v, Mat::from_shape_vec(self.value(*v).dim(), dv).unwrap());
                }
            }
            Op::Elu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= x.exp();
                    }
                });
                acc(*a, d);
            }
            Op::LogSigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(-x));
                acc(*a, d);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for ((mut drow, xrow), yrow) in d.rows_mut().into_iter().zip(x.rows()).zip(y.rows()) {
                    let n = xrow.dot(&xrow).sqrt();
                    if n <= NORM_EPS {
                        drow /= NORM_EPS;
                        continue;
                    }
                    let proj = yrow.dot(&drow);
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = (*dv - yv * proj) / n);
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.dim());
                for (r, (mut drow, xrow)) in d.rows_mut().into_iter().zip(x.rows()).enumerate() {
                    let lse = y[[r, 0]];
                    if lse == f64::NEG_INFINITY {
                        continue;
                    }
                    Zip::from(&mut drow).and(&xrow).for_each(|dv, &xv| *dv = g[[r, 0]] * (xv - lse).exp());
                }
                acc(*a, d);
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Diag(a) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for k in 0..g.nrows() {
                    d[[k, k]] = g[[k, 0]];
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows() as f64;
                let row = g / n;
                acc(*a, Mat::from_shape_fn(self.value(*a).dim(), |(_, k)| row[[0, k]]));
            }
            Op::SumAll(a) => acc(*a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]])),
        }
    }
}
