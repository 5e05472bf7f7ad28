//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and returns
//! gradients for the leaves that were created with `requires_grad`.
//!
//! Shapes are checked with assertions: callers validate user-facing shapes
//! before building a graph, so a mismatch here is a programming error.

use std::rc::Rc;

use crate::tensor::Matrix;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `rows × cols` selection used by the masked reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.bits[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|b| **b)
            .count()
    }
}

/// One contribution `out[row, col] += coef * input[source]` of a scatter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterEntry {
    pub source: usize,
    pub row: usize,
    pub col: usize,
    pub coef: f64,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Gelu(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Sum(usize),
    SumRows(usize),
    ScaleRows(usize, usize),
    RowNormalize(usize),
    RowSoftmax(usize),
    LogSoftmaxRows(usize),
    PickPerRow(usize, Rc<Vec<usize>>),
    GroupSoftmax(usize, Rc<Vec<usize>>),
    Scatter(usize, Rc<Vec<ScatterEntry>>),
    SparseAggregate(usize, usize, Rc<Vec<ScatterEntry>>),
    MaskedRowSum(usize, Rc<Mask>),
    MaskedRowSqDev(usize, Rc<Mask>, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// GELU derivative reusing the forward output `y = x·Φ(x)` to recover
/// `Φ(x)` away from zero.
fn gelu_grad_from_output(x: f64, y: f64) -> f64 {
    if x.abs() < 1e-2 {
        return gelu_grad(x);
    }
    y / x + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let r = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a.0, factor), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).map(|x| x + offset);
        self.push(v, Op::Offset(a.0), &[a.0])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a.0), &[a.0])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi), &[a.0])
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::hcat(&mats);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::HCat(idx.clone()), &idx)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::vcat(&mats);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::VCat(idx.clone()), &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a.0, start), &[a.0])
    }

    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).gather_rows(&indices);
        self.push(v, Op::GatherRows(a.0, indices), &[a.0])
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.push(v, Op::SumRows(a.0), &[a.0])
    }

    /// Multiplies row `i` of `a` by `col[i]`, where `col` is `n × 1`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let (m, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (m.rows(), 1), "scale_rows expects an n x 1 column");
        let v = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * c.get(i, 0));
        self.push(v, Op::ScaleRows(a.0, col.0), &[a.0, col.0])
    }

    /// Divides each row by its Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for i in 0..v.rows() {
            let n = row_norm(m.row(i));
            v.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        self.push(v, Op::RowNormalize(a.0), &[a.0])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::RowSoftmax(a.0), &[a.0])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(v, Op::LogSoftmaxRows(a.0), &[a.0])
    }

    /// `out[i] = a[i, picks[i]]` as an `n × 1` column.
    pub fn pick_per_row(&mut self, a: Var, picks: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        assert_eq!(picks.len(), m.rows());
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.get(i, picks[i]));
        self.push(v, Op::PickPerRow(a.0, picks), &[a.0])
    }

    /// Softmax of an `E × 1` column within groups; `groups[e]` names the
    /// group of entry `e`.
    pub fn group_softmax(&mut self, a: Var, groups: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        assert_eq!(m.shape(), (groups.len(), 1), "group_softmax expects an E x 1 column");
        let n_groups = groups.iter().map(|g| g + 1).max().unwrap_or(0);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (e, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(m.get(e, 0));
        }
        let mut total = vec![0.0; n_groups];
        let mut v = Matrix::zeros(groups.len(), 1);
        for (e, &g) in groups.iter().enumerate() {
            let x = (m.get(e, 0) - max[g]).exp();
            v.set(e, 0, x);
            total[g] += x;
        }
        for (e, &g) in groups.iter().enumerate() {
            v.set(e, 0, v.get(e, 0) / total[g]);
        }
        self.push(v, Op::GroupSoftmax(a.0, groups), &[a.0])
    }

    /// Builds a `rows × cols` matrix from weighted entries of an `E × 1`
    /// column.
    pub fn scatter(&mut self, a: Var, entries: Rc<Vec<ScatterEntry>>, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), 1, "scatter expects an E x 1 column");
        let mut v = Matrix::zeros(rows, cols);
        for e in entries.iter() {
            v.add_at(e.row, e.col, e.coef * src.get(e.source, 0));
        }
        self.push(v, Op::Scatter(a.0, entries), &[a.0])
    }

    /// Weighted row aggregation `out[row] += coef · w[source] · x[col]`
    /// for every entry, giving a `rows × x.cols()` matrix. `w` is `E × 1`.
    pub fn sparse_aggregate(&mut self, w: Var, x: Var, entries: Rc<Vec<ScatterEntry>>, rows: usize) -> Var {
        let wv = self.value(w);
        let xv = self.value(x);
        assert_eq!(wv.cols(), 1, "sparse_aggregate expects an E x 1 weight column");
        let mut v = Matrix::zeros(rows, xv.cols());
        for e in entries.iter() {
            let c = e.coef * wv.get(e.source, 0);
            let src = xv.row(e.col);
            for (o, s) in v.row_mut(e.row).iter_mut().zip(src) {
                *o += c * s;
            }
        }
        self.push(v, Op::SparseAggregate(w.0, x.0, entries), &[w.0, x.0])
    }

    /// `out[i] = Σ_j mask[i,j] · a[i,j]`
    pub fn masked_row_sum(&mut self, a: Var, mask: Rc<Mask>) -> Var {
        let m = self.value(a);
        assert_eq!(mask.shape(), m.shape());
        let v = Matrix::from_fn(m.rows(), 1, |i, _| {
            let row = m.row(i);
            (0..m.cols()).filter(|&j| mask.get(i, j)).map(|j| row[j]).sum()
        });
        self.push(v, Op::MaskedRowSum(a.0, mask), &[a.0])
    }

    /// `out[i] = Σ_j mask[i,j] · (a[i,j] - target)²`
    pub fn masked_row_sq_dev(&mut self, a: Var, mask: Rc<Mask>, target: f64) -> Var {
        let m = self.value(a);
        assert_eq!(mask.shape(), m.shape());
        let v = Matrix::from_fn(m.rows(), 1, |i, _| {
            let row = m.row(i);
            (0..m.cols())
                .filter(|&j| mask.get(i, j))
                .map(|j| (row[j] - target).powi(2))
                .sum()
        });
        self.push(v, Op::MaskedRowSqDev(a.0, mask, target), &[a.0])
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into the gradient slot of `idx` in place, creating a zero
    /// matrix of the node's shape when empty.
    fn accumulate_with(&self, grads: &mut [Option<Matrix>], idx: usize, f: impl FnOnce(&mut Matrix)) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = grads[idx].get_or_insert_with(|| {
            let (r, c) = self.nodes[idx].value.shape();
            Matrix::zeros(r, c)
        });
        f(slot);
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[i].value;
        let val = |k: usize| &self.nodes[k].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut r = Matrix::zeros(1, g.cols());
                    for k in 0..g.rows() {
                        for (acc, x) in r.as_mut_slice().iter_mut().zip(g.row(k)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(val(*b), |q, y| -q / y);
                    self.accumulate(grads, *b, g.zip_map(&t, |x, y| x * y));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for ((gv, &xv), &yv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()).zip(out.as_slice()) {
                    *gv *= gelu_grad_from_output(xv, yv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::LeakyRelu(a, slope) => {
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { *slope });
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Sigmoid(a) => {
                let d = out.map(|y| y * (1.0 - y));
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Clamp(a, lo, hi) => {
                let d = val(*a).map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.wants(p) {
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(r, c, slice));
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for k in 0..r {
                    ga.row_mut(k)[*start..*start + g.cols()].copy_from_slice(g.row(k));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                self.accumulate_with(grads, *a, |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        for (acc, x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *acc += x;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::from_fn(r, c, |k, _| g.get(k, 0)));
            }
            Op::ScaleRows(a, col) => {
                let (m, c) = (val(*a), val(*col));
                if self.wants(*a) {
                    let ga = Matrix::from_fn(m.rows(), m.cols(), |k, j| g.get(k, j) * c.get(k, 0));
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*col) {
                    let gc = Matrix::from_fn(m.rows(), 1, |k, _| {
                        g.row(k).iter().zip(m.row(k)).map(|(x, y)| x * y).sum()
                    });
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for k in 0..x.rows() {
                    let n = row_norm(x.row(k));
                    let y = out.row(k);
                    let gy = g.row(k);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for (j, dst) in ga.row_mut(k).iter_mut().enumerate() {
                        *dst = (gy[j] - y[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for k in 0..out.rows() {
                    let y = out.row(k);
                    let gy = g.row(k);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for (j, dst) in ga.row_mut(k).iter_mut().enumerate() {
                        *dst = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for k in 0..out.rows() {
                    let y = out.row(k);
                    let gy = g.row(k);
                    let total: f64 = gy.iter().sum();
                    for (j, dst) in ga.row_mut(k).iter_mut().enumerate() {
                        *dst = gy[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, picks) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &p) in picks.iter().enumerate() {
                    ga.add_at(k, p, g.get(k, 0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GroupSoftmax(a, groups) => {
                let n_groups = groups.iter().map(|x| x + 1).max().unwrap_or(0);
                let mut dots = vec![0.0; n_groups];
                for (e, &grp) in groups.iter().enumerate() {
                    dots[grp] += out.get(e, 0) * g.get(e, 0);
                }
                let ga = Matrix::from_fn(groups.len(), 1, |e, _| out.get(e, 0) * (g.get(e, 0) - dots[groups[e]]));
                self.accumulate(grads, *a, ga);
            }
            Op::Scatter(a, entries) => {
                let mut ga = Matrix::zeros(val(*a).rows(), 1);
                for e in entries.iter() {
                    ga.add_at(e.source, 0, e.coef * g.get(e.row, e.col));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SparseAggregate(w, x, entries) => {
                let wv = val(*w);
                let xv = val(*x);
                if self.wants(*w) {
                    self.accumulate_with(grads, *w, |gw| {
                        for e in entries.iter() {
                            let dot: f64 = g.row(e.row).iter().zip(xv.row(e.col)).map(|(a, b)| a * b).sum();
                            gw.add_at(e.source, 0, e.coef * dot);
                        }
                    });
                }
                if self.wants(*x) {
                    self.accumulate_with(grads, *x, |gx| {
                        for e in entries.iter() {
                            let c = e.coef * wv.get(e.source, 0);
                            for (o, s) in gx.row_mut(e.col).iter_mut().zip(g.row(e.row)) {
                                *o += c * s;
                            }
                        }
                    });
                }
            }
            Op::MaskedRowSum(a, mask) => {
                self.accumulate_with(grads, *a, |ga| {
                    let c = ga.cols();
                    for k in 0..ga.rows() {
                        let gk = g.get(k, 0);
                        for (j, o) in ga.row_mut(k).iter_mut().enumerate().take(c) {
                            if mask.get(k, j) {
                                *o += gk;
                            }
                        }
                    }
                });
            }
            Op::MaskedRowSqDev(a, mask, target) => {
                let x = val(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for k in 0..x.rows() {
                        let gk = 2.0 * g.get(k, 0);
                        let xr = x.row(k);
                        for (j, o) in ga.row_mut(k).iter_mut().enumerate() {
                            if mask.get(k, j) {
                                *o += gk * (xr[j] - target);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in values.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    values.iter_mut().for_each(|x| *x /= total);
}
