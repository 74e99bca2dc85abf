//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its value. Nodes
//! only reference earlier nodes, so the insertion order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Graph::zero_grad`] in between adds the second pass on top of the
//! first. Nodes built only from constants never receive gradients.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities. Derivatives are evaluated from the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    /// `a*x + (1-a)*(softplus(x) - ln 2)`: smooth, 1-Lipschitz, zero at the
    /// origin, slope in (a, 1).
    SoftLeaky(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Square,
    Sqrt,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::SoftLeaky(a) => a * x + (1.0 - a) * (softplus(x) - std::f64::consts::LN_2),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative at `x`; `y` is the cached forward value.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // hinge derivative is 0 at exactly 0
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::SoftLeaky(a) => a + (1.0 - a) * sigmoid(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x * w^T + b` with `w` stored as (out x in) and `b` as (1 x out).
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Unary(Var, Unary),
    Ln(Var, f64),
    LogSigmoid(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    NormalizeRows(Var),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Leaves that require gradients are created with
/// [`Graph::param`]; everything else is derived from them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Matrix {
    Array2::from_elem((1, 1), x)
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(scalar(x))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Accumulated gradient; zeros when nothing has flowed into `v`.
    pub fn grad(&self, v: Var) -> Matrix {
        let n = &self.nodes[v.0];
        n.grad.clone().unwrap_or_else(|| Array2::zeros(n.value.raw_dim()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut v = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            v += self.value(b);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(v, Op::Linear(x, w, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1 x m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a - col` with `col` (n x 1) broadcast over the columns of `a`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) - self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::SubCol(a, col), rg)
    }

    /// `a * col` with `col` (n x 1) broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).mean().unwrap_or(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Row sums as an (n x 1) column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Column means as a (1 x m) row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows().max(1) as f64;
        let v = (self.value(a).sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).mapv(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(v, Op::Unary(a, f), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(v, Op::Ln(a, floor), rg)
    }

    /// `max(ln sigmoid(a), ln floor)` computed without forming the sigmoid.
    pub fn log_sigmoid_clamped(&mut self, a: Var, floor: f64) -> Var {
        let lf = floor.ln();
        let v = self.value(a).mapv(|x| (-softplus(-x)).max(lf));
        let rg = self.rg(a);
        self.push(v, Op::LogSigmoid(a, lf), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols requires equal row counts");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    /// Column `j` as an (n x 1) matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::Column(a, j), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Rows scaled to unit Euclidean norm. Callers must reject zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|x| x / n);
        }
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows(a), rg)
    }

    /// Propagates d(root)/d(node) into every node that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let n = root.0 + 1;
        let mut pass: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        pass[root.0] = Some(scalar(1.0));

        for idx in (0..n).rev() {
            let Some(dy) = pass[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &dy, &mut pass);
            accumulate(&mut self.nodes[idx].grad, dy);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Matrix, pass: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Matrix| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut pass[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, dy.dot(&val(*b).t()));
                send(*b, val(*a).t().dot(dy));
            }
            Op::Linear(x, w, b) => {
                send(*x, dy.dot(val(*w)));
                send(*w, dy.t().dot(val(*x)));
                if let Some(b) = b {
                    send(*b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, -dy);
            }
            Op::Mul(a, b) => {
                send(*a, dy * val(*b));
                send(*b, dy * val(*a));
            }
            Op::AddRow(a, r) => {
                send(*a, dy.clone());
                send(*r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::SubCol(a, c) => {
                send(*a, dy.clone());
                send(*c, -dy.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulCol(a, c) => {
                send(*a, dy * val(*c));
                send(*c, (dy * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, s) => send(*a, dy * *s),
            Op::AddScalar(a) => send(*a, dy.clone()),
            Op::Sum(a) => send(*a, Array2::from_elem(val(*a).raw_dim(), dy[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                send(*a, Array2::from_elem(val(*a).raw_dim(), dy[[0, 0]] / n));
            }
            Op::SumCols(a) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d += dy;
                send(*a, d);
            }
            Op::MeanRows(a) => {
                let n = val(*a).nrows().max(1) as f64;
                let mut d = Array2::zeros(val(*a).raw_dim());
                d += &(dy / n);
                send(*a, d);
            }
            Op::Unary(a, f) => {
                let mut d = dy.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .and(&node.value)
                    .for_each(|d, &x, &y| *d *= f.derivative(x, y));
                send(*a, d);
            }
            Op::Ln(a, floor) => {
                let mut d = dy.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    *d = if x > *floor { *d / x } else { 0.0 };
                });
                send(*a, d);
            }
            Op::LogSigmoid(a, lf) => {
                let mut d = dy.clone();
                Zip::from(&mut d).and(val(*a)).and(&node.value).for_each(|d, &x, &y| {
                    *d = if y > *lf { *d * sigmoid(-x) } else { 0.0 };
                });
                send(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = dy * y;
                let dots = d.sum_axis(Axis(1)).insert_axis(Axis(1));
                d -= &(y * &dots);
                send(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let p = node.value.mapv(f64::exp);
                let sums = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, dy - &(p * &sums));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).ncols();
                send(*a, dy.slice(ndarray::s![.., ..ca]).to_owned());
                send(*b, dy.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::Column(a, j) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d.column_mut(*j).assign(&dy.column(0));
                send(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &dy.row(r);
                }
                send(*a, d);
            }
            Op::Transpose(a) => send(*a, dy.t().to_owned()),
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let n = x.row(r).dot(&x.row(r)).sqrt().max(f64::MIN_POSITIVE);
                    let proj = dy.row(r).dot(&y.row(r));
                    let mut row = d.row_mut(r);
                    row.assign(&((&dy.row(r) - &(&y.row(r) * proj)) / n));
                }
                send(*a, d);
            }
        }
    }
}

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut v = a.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}
