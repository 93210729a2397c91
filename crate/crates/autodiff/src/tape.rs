//! The tape: a flat record of a forward computation.

use ndarray::{concatenate, Array2, Axis};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tx(usize);

#[derive(Clone)]
enum Op {
    Input,
    MatMul(Tx, Tx),
    Add(Tx, Tx),
    Sub(Tx, Tx),
    MulElem(Tx, Tx),
    /// `(n×d) + (1×d)` with the row broadcast over all rows.
    AddRow(Tx, Tx),
    Scale(Tx, f64),
    Transpose(Tx),
    /// Row-wise softmax. Rows may contain `-inf` entries (from
    /// [`Tape::masked_fill`]); those get exactly zero probability.
    SoftmaxRows(Tx),
    LogSoftmaxRows(Tx),
    /// Entries where the mask is `false` are replaced by `-inf`.
    /// The gradient is zero at masked entries.
    MaskedFill(Tx, Rc<Array2<bool>>),
    LayerNorm {
        x: Tx,
        gamma: Tx,
        beta: Tx,
        eps: f64,
    },
    Relu(Tx),
    Gelu(Tx),
    ConcatRows(Rc<Vec<Tx>>),
    SliceRows(Tx, usize, usize),
    ConcatCols(Rc<Vec<Tx>>),
    SliceCols(Tx, usize, usize),
    /// Gather rows by index; duplicate indices accumulate on backward.
    SelectRows(Tx, Rc<Vec<usize>>),
    /// `1×d` mean over the rows where `keep` is true.
    MeanRowsMasked(Tx, Rc<Vec<bool>>),
    /// Each row divided by its Euclidean norm (clamped below by `eps`).
    L2NormalizeRows(Tx, f64),
    /// `1×1` sum of all entries.
    SumAll(Tx),
    /// `1×1` mean cross-entropy of `logits` rows against integer targets,
    /// restricted to rows where `include` is true. Excluded rows contribute
    /// exactly nothing to the value or the gradient.
    CrossEntropyRows {
        logits: Tx,
        targets: Rc<Vec<usize>>,
        include: Rc<Vec<bool>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node handle.
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. the given node; zeros if the node did not
    /// participate in the differentiated subgraph.
    pub fn of(&self, t: Tx, tape: &Tape) -> Array2<f64> {
        match &self.g[t.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[t.0].value.raw_dim()),
        }
    }

    pub fn has(&self, t: Tx) -> bool {
        self.g[t.0].is_some()
    }
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Read a node's value.
    pub fn value(&self, t: Tx) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Tx {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Tx(self.nodes.len() - 1)
    }

    fn ng(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, v: Array2<f64>) -> Tx {
        self.push(v, Op::Input, true)
    }

    /// A non-differentiable constant (stop-gradient).
    pub fn constant(&mut self, v: Array2<f64>) -> Tx {
        self.push(v, Op::Input, false)
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul_elem(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulElem(a, b), ng)
    }

    /// `(n×d) + (1×d)`, the row broadcast over all rows of `a`.
    pub fn add_row(&mut self, a: Tx, row: Tx) -> Tx {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Tx, c: f64) -> Tx {
        let v = &self.nodes[a.0].value * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn transpose(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Linear layer: `x·w + b` with `b` a `1×d` bias row.
    pub fn linear(&mut self, x: Tx, w: Tx, b: Tx) -> Tx {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn softmax_rows(&mut self, a: Tx) -> Tx {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            debug_assert!(m.is_finite(), "softmax row with no finite entry");
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Tx) -> Tx {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Replace entries where `allowed` is `false` with `-inf`.
    pub fn masked_fill(&mut self, a: Tx, allowed: Rc<Array2<bool>>) -> Tx {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.raw_dim(), allowed.raw_dim());
        let mut v = x.clone();
        v.zip_mut_with(&allowed.mapv(|b| if b { 0.0 } else { f64::NEG_INFINITY }), |e, m| {
            if m.is_infinite() {
                *e = f64::NEG_INFINITY;
            }
        });
        let ng = self.ng(a);
        self.push(v, Op::MaskedFill(a, allowed), ng)
    }

    /// Row-wise layer normalization with per-column gain/offset (`1×d` each).
    pub fn layer_norm(&mut self, x: Tx, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let d = xv.ncols() as f64;
        let mut v = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / d;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter().enumerate() {
                v[[i, j]] = g[[0, j]] * (e - mu) * inv + b[[0, j]];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    pub fn relu(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(|e| e.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|t| self.ng(*t));
        self.push(v, Op::ConcatRows(Rc::new(parts.to_vec())), ng)
    }

    pub fn slice_rows(&mut self, a: Tx, r0: usize, r1: usize) -> Tx {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![r0..r1, ..])
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, r0, r1), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|t| self.ng(*t));
        self.push(v, Op::ConcatCols(Rc::new(parts.to_vec())), ng)
    }

    pub fn slice_cols(&mut self, a: Tx, c0: usize, c1: usize) -> Tx {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., c0..c1])
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, c0, c1), ng)
    }

    pub fn select_rows(&mut self, a: Tx, idx: &[usize]) -> Tx {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(a);
        self.push(v, Op::SelectRows(a, Rc::new(idx.to_vec())), ng)
    }

    /// `1×d` mean over the rows of `a` where `keep` is true.
    /// At least one row must be kept.
    pub fn mean_rows_masked(&mut self, a: Tx, keep: &[bool]) -> Tx {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.nrows(), keep.len());
        let n = keep.iter().filter(|k| **k).count();
        assert!(n > 0, "mean_rows_masked: all rows masked");
        let mut v = Array2::zeros((1, src.ncols()));
        for (i, k) in keep.iter().enumerate() {
            if *k {
                v.row_mut(0).scaled_add(1.0, &src.row(i));
            }
        }
        v.mapv_inplace(|e| e / n as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanRowsMasked(a, Rc::new(keep.to_vec())), ng)
    }

    /// Each row scaled to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead (and stay differentiable).
    pub fn l2_normalize_rows(&mut self, a: Tx, eps: f64) -> Tx {
        assert!(eps > 0.0, "l2_normalize_rows: eps must be positive");
        let src = &self.nodes[a.0].value;
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt().max(eps);
            row.mapv_inplace(|e| e / n);
        }
        let ng = self.ng(a);
        self.push(v, Op::L2NormalizeRows(a, eps), ng)
    }

    /// `1×1` sum of all entries.
    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    /// `1×1` mean cross-entropy over the included rows of `logits` against
    /// integer `targets`. Panics if no row is included; callers decide what an
    /// all-masked batch means.
    pub fn cross_entropy_rows(&mut self, logits: Tx, targets: &[usize], include: &[bool]) -> Tx {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.nrows(), targets.len());
        assert_eq!(x.nrows(), include.len());
        let n_inc = include.iter().filter(|k| **k).count();
        assert!(n_inc > 0, "cross_entropy_rows: all rows excluded");
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            if !include[i] {
                continue;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), total / n_inc as f64);
        let ng = self.ng(logits);
        self.push(
            v,
            Op::CrossEntropyRows {
                logits,
                targets: Rc::new(targets.to_vec()),
                include: Rc::new(include.to_vec()),
            },
            ng,
        )
    }

    /// Backpropagate from a `1×1` loss node.
    pub fn backward(&self, loss: Tx) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.raw_dim(),
            ndarray::Dim([1, 1]),
            "backward: loss must be 1x1"
        );
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let out_grad = match g[i].take() {
                Some(og) => og,
                None => continue,
            };
            self.accumulate(i, &out_grad, &mut g);
            g[i] = Some(out_grad);
        }
        Grads { g }
    }

    fn acc(g: &mut Vec<Option<Array2<f64>>>, t: Tx, delta: Array2<f64>) {
        match &mut g[t.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, og: &Array2<f64>, g: &mut Vec<Option<Array2<f64>>>) {
        match &self.nodes[i].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let d = og.dot(&self.nodes[b.0].value.t());
                    Self::acc(g, *a, d);
                }
                if self.ng(*b) {
                    let d = self.nodes[a.0].value.t().dot(og);
                    Self::acc(g, *b, d);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og.clone());
                }
                if self.ng(*b) {
                    Self::acc(g, *b, og.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og.clone());
                }
                if self.ng(*b) {
                    Self::acc(g, *b, -og);
                }
            }
            Op::MulElem(a, b) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og * &self.nodes[b.0].value);
                }
                if self.ng(*b) {
                    Self::acc(g, *b, og * &self.nodes[a.0].value);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og.clone());
                }
                if self.ng(*row) {
                    let summed = og.sum_axis(Axis(0)).insert_axis(Axis(0));
                    Self::acc(g, *row, summed);
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og * *c);
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    Self::acc(g, *a, og.t().to_owned());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let s = &self.nodes[i].value;
                    let mut d = Array2::zeros(s.raw_dim());
                    for (r, srow) in s.rows().into_iter().enumerate() {
                        let dot: f64 = srow
                            .iter()
                            .zip(og.row(r).iter())
                            .map(|(sv, gv)| sv * gv)
                            .sum();
                        for (c, sv) in srow.iter().enumerate() {
                            d[[r, c]] = sv * (og[[r, c]] - dot);
                        }
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.ng(*a) {
                    let ls = &self.nodes[i].value;
                    let mut d = Array2::zeros(ls.raw_dim());
                    for (r, lrow) in ls.rows().into_iter().enumerate() {
                        let gsum: f64 = og.row(r).sum();
                        for (c, lv) in lrow.iter().enumerate() {
                            d[[r, c]] = og[[r, c]] - lv.exp() * gsum;
                        }
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::MaskedFill(a, allowed) => {
                if self.ng(*a) {
                    let mut d = og.clone();
                    for ((r, c), m) in allowed.indexed_iter() {
                        if !*m {
                            d[[r, c]] = 0.0;
                        }
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let d = xv.ncols() as f64;
                if self.ng(*gamma) || self.ng(*beta) || self.ng(*x) {
                    let mut dgamma = Array2::zeros((1, xv.ncols()));
                    let mut dbeta = Array2::zeros((1, xv.ncols()));
                    let mut dx = Array2::zeros(xv.raw_dim());
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let mu = row.sum() / d;
                        let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|e| (e - mu) * inv).collect();
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat * xhat
                        for c in 0..xv.ncols() {
                            let dxhat = og[[r, c]] * gv[[0, c]];
                            m1 += dxhat;
                            m2 += dxhat * xhat[c];
                            dgamma[[0, c]] += og[[r, c]] * xhat[c];
                            dbeta[[0, c]] += og[[r, c]];
                        }
                        m1 /= d;
                        m2 /= d;
                        for c in 0..xv.ncols() {
                            let dxhat = og[[r, c]] * gv[[0, c]];
                            dx[[r, c]] = inv * (dxhat - m1 - xhat[c] * m2);
                        }
                    }
                    if self.ng(*x) {
                        Self::acc(g, *x, dx);
                    }
                    if self.ng(*gamma) {
                        Self::acc(g, *gamma, dgamma);
                    }
                    if self.ng(*beta) {
                        Self::acc(g, *beta, dbeta);
                    }
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let xv = &self.nodes[a.0].value;
                    let d = og * &xv.mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                    Self::acc(g, *a, d);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let xv = &self.nodes[a.0].value;
                    let d = og * &xv.mapv(gelu_grad_scalar);
                    Self::acc(g, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts.iter() {
                    let n = self.nodes[p.0].value.nrows();
                    if self.ng(*p) {
                        let d = og.slice(ndarray::s![r0..r0 + n, ..]).to_owned();
                        Self::acc(g, *p, d);
                    }
                    r0 += n;
                }
            }
            Op::SliceRows(a, r0, r1) => {
                if self.ng(*a) {
                    let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    d.slice_mut(ndarray::s![*r0..*r1, ..]).assign(og);
                    Self::acc(g, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts.iter() {
                    let n = self.nodes[p.0].value.ncols();
                    if self.ng(*p) {
                        let d = og.slice(ndarray::s![.., c0..c0 + n]).to_owned();
                        Self::acc(g, *p, d);
                    }
                    c0 += n;
                }
            }
            Op::SliceCols(a, c0, c1) => {
                if self.ng(*a) {
                    let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    d.slice_mut(ndarray::s![.., *c0..*c1]).assign(og);
                    Self::acc(g, *a, d);
                }
            }
            Op::SelectRows(a, idx) => {
                if self.ng(*a) {
                    let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    for (i_out, &r) in idx.iter().enumerate() {
                        d.row_mut(r).scaled_add(1.0, &og.row(i_out));
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::L2NormalizeRows(a, eps) => {
                if self.ng(*a) {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut d = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                        let n = norm.max(*eps);
                        if norm > *eps {
                            // d x̂ / d x = (I − x̂ x̂ᵀ) / ‖x‖
                            let dot: f64 = og
                                .row(r)
                                .iter()
                                .zip(y.row(r).iter())
                                .map(|(gv, yv)| gv * yv)
                                .sum();
                            for c in 0..x.ncols() {
                                d[[r, c]] = (og[[r, c]] - y[[r, c]] * dot) / n;
                            }
                        } else {
                            // Below the clamp the map is linear: y = x / eps.
                            for c in 0..x.ncols() {
                                d[[r, c]] = og[[r, c]] / n;
                            }
                        }
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::MeanRowsMasked(a, keep) => {
                if self.ng(*a) {
                    let n = keep.iter().filter(|k| **k).count() as f64;
                    let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, k) in keep.iter().enumerate() {
                        if *k {
                            d.row_mut(r).assign(&(&og.row(0) / n));
                        }
                    }
                    Self::acc(g, *a, d);
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let d = Array2::from_elem(self.nodes[a.0].value.raw_dim(), og[[0, 0]]);
                    Self::acc(g, *a, d);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                include,
            } => {
                if self.ng(*logits) {
                    let x = &self.nodes[logits.0].value;
                    let n_inc = include.iter().filter(|k| **k).count() as f64;
                    let scale = og[[0, 0]] / n_inc;
                    let mut d = Array2::zeros(x.raw_dim());
                    for (r, row) in x.rows().into_iter().enumerate() {
                        if !include[r] {
                            continue;
                        }
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|e| (e - m).exp()).sum();
                        for (c, e) in row.iter().enumerate() {
                            let p = (e - m).exp() / denom;
                            d[[r, c]] = scale * (p - if c == targets[r] { 1.0 } else { 0.0 });
                        }
                    }
                    Self::acc(g, *logits, d);
                }
            }
        }
    }
}
