//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly (values are computed when the
//! node is pushed) and [`Tape::backward`] walks the nodes in reverse to
//! accumulate exact gradients. Only nodes that depend on a parameter leaf
//! receive gradients; constants and detached values are skipped.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row` with `row` broadcast over the rows of `a`.
    AddRow(Var, Var),
    /// `a .* row` with `row` broadcast over the rows of `a`.
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Max(Var, (usize, usize)),
    RowCosine(Var, Var),
    Detach,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Norms below this are treated as zero by [`Tape::row_cosine`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn cosine_row(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> (f64, f64, f64, f64) {
    let dot = a.dot(&b);
    let (na2, nb2) = (a.dot(&a), b.dot(&b));
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        (0.0, dot, na, nb)
    } else {
        (dot / (na2 * nb2).sqrt(), dot, na, nb)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Column vector constant.
    pub fn column(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1xN row");
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1xN row");
        let v = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.needs(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, biased variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let ng = self.needs(a);
        self.push(v, Op::NormalizeRows(a, eps), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Largest entry; the gradient goes to its first occurrence.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((i, j), &x) in m.indexed_iter() {
            if x > best_v {
                best_v = x;
                best = (i, j);
            }
        }
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), best_v), Op::Max(a, best), ng)
    }

    /// Cosine similarity of matching rows, as an `n x 1` column. A row whose
    /// norm is below [`COSINE_NORM_FLOOR`] has similarity 0 and no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "row_cosine shape mismatch");
        let mut v = Array2::zeros((va.nrows(), 1));
        for (i, (ra, rb)) in va.rows().into_iter().zip(vb.rows()).enumerate() {
            v[[i, 0]] = cosine_row(ra, rb).0;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::RowCosine(a, b), ng)
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.needs(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    acc(*a, g * self.value(*row));
                }
                if self.needs(*row) {
                    acc(*row, (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::Square(a) => acc(*a, g * &(self.value(*a) * 2.0)),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y * dot);
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a, eps) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.dim());
                for ((mut drow, xrow), (grow, yrow)) in d
                    .rows_mut()
                    .into_iter()
                    .zip(x.rows())
                    .zip(g.rows().into_iter().zip(out.rows()))
                {
                    let n = xrow.len() as f64;
                    let mean = xrow.sum() / n;
                    let var = xrow.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.sum() / n;
                    let gy = grow.dot(&yrow) / n;
                    Zip::from(&mut drow)
                        .and(&grow)
                        .and(&yrow)
                        .for_each(|dv, &gv, &yv| *dv = inv * (gv - gmean - yv * gy));
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.needs(*p) {
                        acc(*p, g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.needs(*p) {
                        acc(*p, g.slice(s![at..at + h, ..]).to_owned());
                    }
                    at += h;
                }
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let dim = self.value(*a).dim();
                let n = (dim.0 * dim.1) as f64;
                acc(*a, Array2::from_elem(dim, g[[0, 0]] / n));
            }
            Op::Max(a, at) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d[*at] = g[[0, 0]];
                acc(*a, d);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Array2::zeros(va.dim());
                let mut db = Array2::zeros(vb.dim());
                for i in 0..va.nrows() {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let (c, _, na, nb) = cosine_row(ra, rb);
                    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let gi = g[[i, 0]];
                    let inv = 1.0 / (na * nb);
                    Zip::from(da.row_mut(i)).and(&ra).and(&rb).for_each(|d, &x, &y| {
                        *d = gi * (y * inv - c * x / (na * na));
                    });
                    Zip::from(db.row_mut(i)).and(&ra).and(&rb).for_each(|d, &x, &y| {
                        *d = gi * (x * inv - c * y / (nb * nb));
                    });
                }
                if self.needs(*a) {
                    acc(*a, da);
                }
                if self.needs(*b) {
                    acc(*b, db);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`. Test-support oracle.
pub fn finite_difference(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let pos = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[pos];
        probe[pos] = orig + h;
        let up = f(&probe);
        probe[pos] = orig - h;
        let down = f(&probe);
        probe[pos] = orig;
        out[pos] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise error, relative where `|expected| >= 1e-6` and
/// absolute below that.
pub fn max_gradient_error(analytic: &Mat, numeric: &Mat) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-6 {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
