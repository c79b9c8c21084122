use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use sprs::CsMat;

use super::{Matrix, EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Rc<CsMat<f64>>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    SoftThreshold(Var, Var),
    RowSoftmax(Var),
    RowL2Normalize(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    ConcatCols(Vec<Var>),
    MaskedSelect(Var, Rc<Vec<usize>>),
    Element(Var, usize, usize),
    InfoNce(Var, Rc<ContrastMasks>, f64),
}

/// Constant masks for [`Tape::info_nce_rows`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastMasks {
    /// `positive[[i, j]]` marks `j` as a positive of anchor `i`.
    pub positive: Array2<bool>,
    /// Multiplier applied to negative logits; `None` leaves them as is.
    pub damping: Option<Matrix>,
}

impl ContrastMasks {
    fn damp(&self, i: usize, j: usize) -> f64 {
        self.damping.as_ref().map_or(1.0, |d| d[[i, j]])
    }

    /// `ln(pos + neg + EPS) - ln(pos + EPS)` for every row of `sim`.
    pub fn row_losses(&self, sim: &Matrix, tau: f64) -> Array2<f64> {
        assert_eq!(sim.dim(), self.positive.dim(), "info_nce_rows mask shape");
        if let Some(d) = &self.damping {
            assert_eq!(sim.dim(), d.dim(), "info_nce_rows damping shape");
        }
        let mut terms = vec![0.0; sim.ncols()];
        let mut out = Array2::zeros((sim.nrows(), 1));
        for (i, row) in sim.rows().into_iter().enumerate() {
            let (pos, neg) = info_nce_terms(row, self, i, tau, &mut terms);
            out[[i, 0]] = (pos + neg + EPS).ln() - (pos + EPS).ln();
        }
        out
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records dense matrix operations for reverse-mode differentiation.
///
/// Every operation appends a node, so the node list is already in
/// topological order. All values are 2-D; vectors are `n x 1` or `1 x n`
/// and scalars are `1 x 1`. Operations panic on shape mismatch, like
/// `ndarray` arithmetic does.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn soft_threshold(t: f64, phi: f64) -> f64 {
    t.signum() * (t.abs() - phi).max(0.0)
}

/// Fills `terms` with each entry's exponential and returns the positive and
/// negative sums of row `i`.
fn info_nce_terms(
    row: ndarray::ArrayView1<f64>,
    masks: &ContrastMasks,
    i: usize,
    tau: f64,
    terms: &mut [f64],
) -> (f64, f64) {
    let (mut pos, mut neg) = (0.0, 0.0);
    let positive = masks.positive.row(i);
    let damping = masks.damping.as_ref().map(|d| d.row(i));
    for (j, (&x, t)) in row.iter().zip(terms.iter_mut()).enumerate() {
        if positive[j] {
            *t = (x / tau).exp();
            pos += *t;
        } else {
            let k = damping.as_ref().map_or(1.0, |d| d[j]);
            *t = (k * x / tau).exp();
            neg += *t;
        }
    }
    (pos, neg)
}

/// Rows divided by `sqrt(|row|^2 + EPS)`, as [`Tape::row_l2_normalize`].
pub fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(row_norms(x)) {
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn row_norms(x: &Matrix) -> Vec<f64> {
    x.rows().into_iter().map(|r| (r.dot(&r) + EPS).sqrt()).collect()
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

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(shape(&m), (1, 1), "scalar_value on non-scalar");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.ncols(), y.nrows(), "matmul {:?} x {:?}", x.dim(), y.dim());
            x.dot(&*y)
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Sparse constant times dense variable.
    pub fn sparse_matmul(&self, a: Rc<CsMat<f64>>, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            assert_eq!(a.cols(), xv.nrows(), "sparse_matmul {:?} x {:?}", a.shape(), xv.dim());
            &*a * &*xv
        };
        let rg = self.needs(&[x]);
        self.push(out, Op::SpMM(a, x), rg)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) -> (Rc<Matrix>, Rc<Matrix>) {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dim(), y.dim(), "{name} {:?} vs {:?}", x.dim(), y.dim());
        (x, y)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = self.binary_same(a, b, "add");
            &*x + &*y
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = self.binary_same(a, b, "sub");
            &*x - &*y
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = self.binary_same(a, b, "mul");
            &*x * &*y
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!(r.dim(), (1, x.ncols()), "add_row {:?} + {:?}", x.dim(), r.dim());
            &*x + &*r
        };
        let rg = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).mapv(|v| v * s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a` times a `1 x 1` variable.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let out = self.value(a).mapv(|v| v * sv);
        let rg = self.needs(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(x + EPS)`.
    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| (x + EPS).ln(), Op::Log(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `sgn(t) * max(0, |t| - phi)` with a learnable `1 x 1` threshold.
    pub fn soft_threshold(&self, t: Var, phi: Var) -> Var {
        let p = self.scalar_value(phi);
        let out = self.value(t).mapv(|x| soft_threshold(x, p));
        let rg = self.needs(&[t, phi]);
        self.push(out, Op::SoftThreshold(t, phi), rg)
    }

    pub fn row_softmax(&self, a: Var) -> Var {
        let mut out = (*self.value(a)).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    /// Rows divided by `sqrt(|row|^2 + EPS)`.
    pub fn row_l2_normalize(&self, a: Var) -> Var {
        let out = normalize_rows(&self.value(a));
        let rg = self.needs(&[a]);
        self.push(out, Op::RowL2Normalize(a), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / x.len() as f64;
        let rg = self.needs(&[a]);
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a), rg)
    }

    /// Sum across columns, giving `rows x 1`.
    pub fn row_sum(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.needs(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Mean over rows, giving `1 x cols`.
    pub fn col_mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let out = (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0));
        let rg = self.needs(&[a]);
        self.push(out, Op::ColMean(a), rg)
    }

    pub fn concat_columns(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_columns of nothing");
        let out = {
            let vals: Vec<Rc<Matrix>> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_columns: row counts differ")
        };
        let rg = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Entries where `mask` is true, in row-major order, as a `k x 1` column.
    pub fn masked_select(&self, a: Var, mask: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "masked_select shape");
        let ncols = x.ncols();
        let idx: Vec<usize> = mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((i, j), _)| i * ncols + j)
            .collect();
        let out = Array2::from_shape_fn((idx.len(), 1), |(k, _)| x[[idx[k] / ncols, idx[k] % ncols]]);
        drop(x);
        let rg = self.needs(&[a]);
        self.push(out, Op::MaskedSelect(a, Rc::new(idx)), rg)
    }

    /// Single entry as a `1 x 1` value.
    pub fn element(&self, a: Var, row: usize, col: usize) -> Var {
        let v = self.value(a)[[row, col]];
        let rg = self.needs(&[a]);
        self.push(Array2::from_elem((1, 1), v), Op::Element(a, row, col), rg)
    }

    /// Per-anchor InfoNCE losses `ln(pos + neg) - ln(pos)` as an `n x 1`
    /// column, where row `i` sums `exp(s_ij / tau)` over positives and
    /// `exp(damp_ij * s_ij / tau)` over the remaining columns.
    pub fn info_nce_rows(&self, sim: Var, masks: Rc<ContrastMasks>, tau: f64) -> Var {
        let out = masks.row_losses(&self.value(sim), tau);
        let rg = self.needs(&[sim]);
        self.push(out, Op::InfoNce(sim, masks, tau), rg)
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if shape(&nodes[loss.0].value) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", shape(&nodes[loss.0].value)),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Matrix| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| -> &Matrix { &nodes[v.0].value };
            let y = &*node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::SpMM(m, x) => acc(*x, &m.transpose_view() * &g),
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::ScaleBy(a, s) => {
                    let sv = val(*s)[[0, 0]];
                    acc(*s, Array2::from_elem((1, 1), (&g * val(*a)).sum()));
                    acc(*a, g * sv);
                }
                Op::Exp(a) => acc(*a, g * y),
                Op::Log(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| *d /= x + EPS);
                    acc(*a, d)
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    d.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
                    acc(*a, d)
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d)
                }
                Op::Elu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= 0.0 {
                            *d *= x.exp()
                        }
                    });
                    acc(*a, d)
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| *d *= sigmoid(x));
                    acc(*a, d)
                }
                Op::Abs(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| *d *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    acc(*a, d)
                }
                Op::Square(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| *d *= 2.0 * x);
                    acc(*a, d)
                }
                Op::SoftThreshold(t, phi) => {
                    let p = val(*phi)[[0, 0]];
                    let mut d = g;
                    let mut dphi = 0.0;
                    d.zip_mut_with(val(*t), |d, &x| {
                        if x.abs() > p {
                            dphi -= *d * x.signum();
                        } else {
                            *d = 0.0;
                        }
                    });
                    acc(*phi, Array2::from_elem((1, 1), dphi));
                    acc(*t, d);
                }
                Op::RowSoftmax(a) => {
                    let mut d = g;
                    for (mut dr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let gy = dr.dot(&yr);
                        dr.zip_mut_with(&yr, |dv, &yv| *dv = yv * (*dv - gy));
                    }
                    acc(*a, d)
                }
                Op::RowL2Normalize(a) => {
                    let norms = row_norms(val(*a));
                    let mut d = g;
                    for ((mut dr, yr), n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let gy = dr.dot(&yr);
                        dr.zip_mut_with(&yr, |dv, &yv| *dv = (*dv - yv * gy) / n);
                    }
                    acc(*a, d)
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let x = val(*a);
                    acc(*a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64))
                }
                Op::RowSum(a) => {
                    let dim = val(*a).dim();
                    acc(*a, g.broadcast(dim).expect("row_sum broadcast").to_owned())
                }
                Op::ColMean(a) => {
                    let dim = val(*a).dim();
                    let scaled = g / dim.0 as f64;
                    acc(*a, scaled.broadcast(dim).expect("col_mean broadcast").to_owned())
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(*p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::MaskedSelect(a, idx) => {
                    let x = val(*a);
                    let ncols = x.ncols();
                    let mut d = Array2::zeros(x.dim());
                    for (k, &f) in idx.iter().enumerate() {
                        d[[f / ncols, f % ncols]] += g[[k, 0]];
                    }
                    acc(*a, d)
                }
                Op::Element(a, r, c) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d[[*r, *c]] = g[[0, 0]];
                    acc(*a, d)
                }
                Op::InfoNce(a, masks, tau) => {
                    let s = val(*a);
                    let mut d = Array2::zeros(s.dim());
                    let mut terms = vec![0.0; s.ncols()];
                    for (i, (row, mut drow)) in s.rows().into_iter().zip(d.rows_mut()).enumerate() {
                        let (pos, neg) = info_nce_terms(row, masks, i, *tau, &mut terms);
                        let gi = g[[i, 0]];
                        let whole = gi / ((pos + neg + EPS) * tau);
                        let part = gi / ((pos + EPS) * tau);
                        for (j, (&t, dv)) in terms.iter().zip(drow.iter_mut()).enumerate() {
                            *dv = if masks.positive[[i, j]] {
                                t * (whole - part)
                            } else {
                                t * masks.damp(i, j) * whole
                            };
                        }
                    }
                    acc(*a, d)
                }
            }
        }
        Ok(Gradients {
            grads,
            values: nodes.into_iter().map(|n| n.value).collect(),
        })
    }
}

/// Gradients of a scalar with respect to every `requires_grad` node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    values: Vec<Rc<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.values[v.0].dim()))
    }

    /// Forward value of `v` as recorded before the reverse pass.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }
}
