//! A small reverse-mode tape over dense matrices.
//!
//! A [`Graph`] records every forward operation as a node. Leaves are either
//! parameters (gradients wanted) or constants. [`Graph::backward`] walks the
//! nodes in reverse creation order and returns the gradient of a scalar node
//! with respect to every node that depends on a parameter.
//!
//! Binary elementwise ops broadcast: each operand dimension must either match
//! the output or be 1.

use std::sync::Arc;

use crate::tensor::{CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Exp(Var),
    Powf(Var, f64),
    RowNormalize(Var, f64),
    RowSum(Var),
    SumAll(Var),
    SetDiag(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SpMM(Arc<CsrMatrix>, Var),
    BprTerm(Var),
    LogSumExpRows(Var, bool),
    Diag(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Clamp applied to the BPR margin before the log-sigmoid.
pub const BPR_CLAMP: f64 = 40.0;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs_grad(a);
        self.push(value, op, ng)
    }

    fn binary_node(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.binary_node(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.binary_node(a, b, value, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.binary_node(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.binary_node(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.binary_node(a, b, value, Op::Mul(a, b))
    }

    /// `a * scale + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| v * scale + shift);
        self.unary(a, value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|v| v.powf(p));
        self.unary(a, value, Op::Powf(a, p))
    }

    /// Each row divided by `‖row‖₂ + eps`; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let d = crate::tensor::norm(src.row(r)) + eps;
            if d > 0.0 {
                value.row_mut(r).iter_mut().for_each(|v| *v /= d);
            }
        }
        self.unary(a, value, Op::RowNormalize(a, eps))
    }

    /// `m x n -> m x 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let sums: Vec<f64> = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        self.unary(a, value, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Copy of a square matrix with the diagonal overwritten by `value`.
    pub fn set_diag(&mut self, a: Var, value: f64) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.rows(), out.cols(), "set_diag on non-square matrix");
        for i in 0..out.rows() {
            out.set(i, i, value);
        }
        self.unary(a, out, Op::SetDiag(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).gather_rows(indices);
        self.unary(a, value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        assert!(start <= end && end <= src.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Matrix::from_vec(src.rows(), end - start, data);
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                offset += m.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let lse = log_sum_exp(src.row(r).iter().copied());
            value.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(a, value, Op::LogSoftmaxRows(a))
    }

    /// `sparse · a` with a constant sparse operator.
    pub fn spmm(&mut self, sparse: &Arc<CsrMatrix>, a: Var) -> Var {
        let value = sparse.spmm(self.value(a));
        self.unary(a, value, Op::SpMM(Arc::clone(sparse), a))
    }

    /// Elementwise `−log σ(clamp(x, −40, 40))`.
    pub fn bpr_term(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| softplus(-x.clamp(-BPR_CLAMP, BPR_CLAMP)));
        self.unary(a, value, Op::BprTerm(a))
    }

    /// Row-wise log-sum-exp, `m x n -> m x 1`. With `exclude_diag` the entry
    /// `(i, i)` is left out of row `i`.
    pub fn log_sum_exp_rows(&mut self, a: Var, exclude_diag: bool) -> Var {
        let src = self.value(a);
        let sums: Vec<f64> = (0..src.rows())
            .map(|r| {
                log_sum_exp(
                    src.row(r)
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| !(exclude_diag && c == r))
                        .map(|(_, &v)| v),
                )
            })
            .collect();
        let value = Matrix::column_vector(&sums);
        self.unary(a, value, Op::LogSumExpRows(a, exclude_diag))
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, a: Var) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), src.cols(), "diag of non-square matrix");
        let d: Vec<f64> = (0..src.rows()).map(|i| src.get(i, i)).collect();
        let value = Matrix::column_vector(&d);
        self.unary(a, value, Op::Diag(a))
    }

    /// Row-wise dot product of two equally shaped matrices, `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        self.row_sum(prod)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs_grad(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs_grad(a) {
                    self.accumulate(grads, a, g.matmul_nt(self.value(b)));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, self.value(a).matmul_tn(g));
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.needs_grad(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b)));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, g.matmul_tn(self.value(a)));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                if self.needs_grad(a) {
                    self.accumulate(grads, a, reduce_to(g, self.value(a).shape()));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, reduce_to(g, self.value(b).shape()));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs_grad(a) {
                    self.accumulate(grads, a, reduce_to(g, self.value(a).shape()));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, reduce_to(g, self.value(b).shape()).scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    let full = broadcast_zip(g, vb, |x, y| x * y);
                    self.accumulate(grads, a, reduce_to(&full, va.shape()));
                }
                if self.needs_grad(b) {
                    let full = broadcast_zip(g, va, |x, y| x * y);
                    self.accumulate(grads, b, reduce_to(&full, vb.shape()));
                }
            }
            &Op::Affine(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, a, ga);
            }
            &Op::Powf(a, p) => {
                let ga = g.zip_map(self.value(a), |gv, x| gv * p * x.powf(p - 1.0));
                self.accumulate(grads, a, ga);
            }
            &Op::RowNormalize(a, eps) => {
                let x = self.value(a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let n = crate::tensor::norm(xr);
                    let d = n + eps;
                    if d == 0.0 {
                        continue;
                    }
                    let out = ga.row_mut(r);
                    if n == 0.0 {
                        out.iter_mut().zip(gr).for_each(|(o, gv)| *o = gv / d);
                        continue;
                    }
                    let xg = crate::tensor::dot(xr, gr);
                    let coef = xg / (n * d * d);
                    for ((o, gv), xv) in out.iter_mut().zip(gr).zip(xr) {
                        *o = gv / d - xv * coef;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::RowSum(a) => {
                let x = self.value(a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SumAll(a) => {
                let (rows, cols) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(rows, cols, g.item()));
            }
            &Op::SetDiag(a) => {
                let mut ga = g.clone();
                for d in 0..ga.rows() {
                    ga.set(d, d, 0.0);
                }
                self.accumulate(grads, a, ga);
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &src) in indices.iter().enumerate() {
                    for (o, gv) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::SliceRows(a, start) => {
                let x = self.value(a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SliceCols(a, start) => {
                let x = self.value(a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, offset + rows));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = crate::tensor::dot(g.row(r), y.row(r));
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::SpMM(sparse, a) => self.accumulate(grads, *a, sparse.spmm_t(g)),
            &Op::BprTerm(a) => {
                let ga = g.zip_map(self.value(a), |gv, x| {
                    if x.abs() < BPR_CLAMP {
                        gv * (sigmoid(x) - 1.0)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, ga);
            }
            &Op::LogSumExpRows(a, exclude_diag) => {
                let x = self.value(a);
                let y = &node.value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let lse = y.get(r, 0);
                    let gv = g.get(r, 0);
                    for (c, (o, xv)) in ga.row_mut(r).iter_mut().zip(x.row(r)).enumerate() {
                        if !(exclude_diag && c == r) {
                            *o = gv * (xv - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::Diag(a) => {
                let x = self.value(a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for d in 0..x.rows() {
                    ga.set(d, d, g.get(d, 0));
                }
                self.accumulate(grads, a, ga);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
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

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    match (a, b) {
        _ if a == b => a,
        (1, n) | (n, 1) => n,
        _ => panic!("incompatible broadcast dimensions {a} and {b}"),
    }
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let rows = broadcast_dim(a.rows(), b.rows());
    let cols = broadcast_dim(a.cols(), b.cols());
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let pick = |m: &Matrix, r: usize, c: usize| {
        m.get(
            if m.rows() == 1 { 0 } else { r },
            if m.cols() == 1 { 0 } else { c },
        )
    };
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, f(pick(a, r, c), pick(b, r, c)));
        }
    }
    out
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let tr = if shape.0 == 1 { 0 } else { r };
            let tc = if shape.1 == 1 { 0 } else { c };
            let cur = out.get(tr, tc);
            out.set(tr, tc, cur + g.get(r, c));
        }
    }
    out
}
