//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Vectors are row
//! matrices (`1 x n`). Leaves are either constants or parameters tagged with
//! their index in a parameter store; [`Tape::backward`] returns gradients
//! for every parameter leaf reached from the loss.

use nalgebra::DMatrix;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a 1x1 matrix, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powi(Var, i32),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    RowMean(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of parameter leaves, indexed by parameter position.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Option<Matrix>>,
}

fn same_shape(a: &Matrix, b: &Matrix, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_element(1, 1, x))
    }

    /// A differentiable leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimensions differ");
        let out = va * vb;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let out = self.value(a).component_mul(self.value(b));
        self.push(out, Op::Mul(a, b))
    }

    /// `a + 1·row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(
            vr.nrows() == 1 && vr.ncols() == va.ncols(),
            "add_row: bad bias shape"
        );
        let mut out = va.clone();
        for mut r in out.row_iter_mut() {
            r += vr.row(0);
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise integer power.
    pub fn powi(&mut self, a: Var, p: i32) -> Var {
        let out = self.value(a).map(|x| x.powi(p));
        self.push(out, Op::Powi(a, p))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "min");
        let out = self.value(a).zip_map(self.value(b), f64::min);
        self.push(out, Op::Min(a, b))
    }

    /// Mean over the last axis: `m x n -> m x 1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let out = Matrix::from_fn(va.nrows(), 1, |i, _| va.row(i).sum() / n);
        self.push(out, Op::RowMean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_element(1, 1, self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Matrix::from_element(1, 1, self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols: row counts differ");
            out.columns_mut(c0, v.ncols()).copy_from(v);
            c0 += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse sweep from a scalar loss. `n_params` sizes the result.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<ParamGrads, AutodiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(lv.nrows(), lv.ncols()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::from_element(1, 1, 1.0));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = Matrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *row, gr);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g * *c),
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::Powi(a, p) => {
                    let p = *p;
                    let d = self.value(*a).map(|x| p as f64 * x.powi(p - 1));
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Relu(a) => {
                    let d = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|y| y * (1.0 - y));
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Log(a) => {
                    let d = self.value(*a).map(|x| 1.0 / x);
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Exp(a) => {
                    acc(&mut adj, *a, g.component_mul(&node.value));
                }
                Op::Clamp(a, lo, hi) => {
                    let d = self
                        .value(*a)
                        .map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    acc(&mut adj, *a, g.component_mul(&d));
                }
                Op::Min(a, b) => {
                    let pick_a =
                        self.value(*a)
                            .zip_map(self.value(*b), |x, y| if x <= y { 1.0 } else { 0.0 });
                    let pick_b = pick_a.map(|m| 1.0 - m);
                    acc(&mut adj, *a, g.component_mul(&pick_a));
                    acc(&mut adj, *b, g.component_mul(&pick_b));
                }
                Op::RowMean(a) => {
                    let va = self.value(*a);
                    let n = va.ncols() as f64;
                    let ga = Matrix::from_fn(va.nrows(), va.ncols(), |i, _| g[(i, 0)] / n);
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_element(va.nrows(), va.ncols(), g[(0, 0)]),
                    );
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let n = (va.nrows() * va.ncols()) as f64;
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_element(va.nrows(), va.ncols(), g[(0, 0)] / n),
                    );
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.columns(c0, w).into_owned());
                        c0 += w;
                    }
                }
            }
        }

        let mut grads = vec![None; n_params];
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(p), Some(g)) = (node.param, adj[idx].take()) {
                match &mut grads[p] {
                    Some(existing) => *existing += g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(ParamGrads { grads })
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
