//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! forward value and the ids of its inputs. [`Tape::backward`] walks the list
//! in reverse and accumulates adjoints. Nodes that do not depend on a
//! parameter are never visited during the backward pass.
//!
//! Besides the usual dense primitives the tape has fused nodes for the
//! pieces of the model whose adjoints are easier to write in closed form:
//! origin exp/log maps on the hyperboloid, Lorentz distance, per-column batch
//! standardization, the Tucker core contraction and bidirectional InfoNCE.

use std::sync::Arc;

use crate::linalg::{Csr, Matrix};
use crate::manifold::{Curvature, ZERO_NORM};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};
use crate::tucker;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse matrix together with its transpose, shared between tapes.
#[derive(Debug)]
pub struct SparseOperand<T> {
    pub forward: Csr<T>,
    pub transposed: Csr<T>,
}

impl<T: Scalar> SparseOperand<T> {
    pub fn new(m: Csr<T>) -> Arc<Self> {
        let transposed = m.transpose();
        Arc::new(Self {
            forward: m,
            transposed,
        })
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Affine(Var, T),
    MulConst(Var, Arc<Matrix<T>>),
    SpMM(Arc<SparseOperand<T>>, Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    RowDot(Var, Var),
    RowNormalize(Var, T),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Standardize(Var, Vec<T>),
    Tucker {
        core: Var,
        h: Var,
        r: Var,
        t: Var,
    },
    InfoNce(Var, Var, T),
    ExpOrigin(Var, Curvature<T>, T),
    LogOrigin(Var, Curvature<T>),
    LorentzDist(Var, Var, Curvature<T>),
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Adjoint of `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul {ra}x{ca} by {rb}x{cb}");
        let v = self.value(a).matmul_unchecked(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b), &[a, b])
    }

    /// `a + 1·bias` with `bias` of shape 1 x cols.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "add_row bias shape");
        let b = self.value(bias).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, &bb) in v.row_mut(r).iter_mut().zip(&b) {
                *x += bb;
            }
        }
        self.push(v, Op::AddRow(a, bias), &[a, bias])
    }

    /// Scales row `i` of `a` by `s[i]` (`s` is rows x 1).
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(s), (r, 1), "mul_rows scale shape");
        let mut v = self.value(a).clone();
        for i in 0..r {
            let k = self.value(s)[(i, 0)];
            v.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        self.push(v, Op::MulRows(a, s), &[a, s])
    }

    /// `s · a` for a 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar");
        let v = self.value(a).scale(self.scalar(s));
        self.push(v, Op::ScaleBy(a, s), &[a, s])
    }

    /// `a + s` for a 1x1 node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "add_scalar expects a scalar");
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a, s), &[a, s])
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: Var, alpha: T, beta: T) -> Var {
        let v = self.value(a).map(|x| alpha * x + beta);
        self.push(v, Op::Affine(a, alpha), &[a])
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Var {
        self.affine(a, alpha, T::zero())
    }

    /// Element-wise product with a constant matrix (dropout masks, frozen scales).
    pub fn mul_const(&mut self, a: Var, m: Arc<Matrix<T>>) -> Var {
        assert_eq!(self.shape(a), m.shape(), "mul_const shape");
        let v = self.value(a).hadamard(&m);
        self.push(v, Op::MulConst(a, m), &[a])
    }

    pub fn spmm(&mut self, s: Arc<SparseOperand<T>>, a: Var) -> Var {
        let v = s
            .forward
            .spmm(self.value(a))
            .expect("spmm shape mismatch on tape");
        self.push(v, Op::SpMM(s, a), &[a])
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::Gather(a, idx.to_vec()), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let (va, vb) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(ra, ca + cb, |r, c| {
            if c < ca {
                va[(r, c)]
            } else {
                vb[(r, c - ca)]
            }
        });
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a), &[a])
    }

    /// Row-wise inner products, shape rows x 1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shape");
        let (va, vb) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(va.rows(), 1, |r, _| {
            va.row(r).iter().zip(vb.row(r)).map(|(&x, &y)| x * y).sum()
        });
        self.push(v, Op::RowDot(a, b), &[a, b])
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: T) -> Var {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            let n = row_norm(va.row(r)).max(eps);
            v.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        self.push(v, Op::RowNormalize(a, eps), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len().max(1));
        let v = Matrix::scalar(self.value(a).sum() / n);
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum_squares());
        self.push(v, Op::SumSquares(a), &[a])
    }

    /// Per-column standardization with the statistics of this batch.
    ///
    /// Returns the node and the (mean, biased variance) of each column.
    pub fn standardize(&mut self, a: Var, eps: T) -> (Var, Vec<T>, Vec<T>) {
        let va = self.value(a);
        let (n, m) = va.shape();
        let nn = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); m];
        let mut var = vec![T::zero(); m];
        for r in 0..n {
            for (mu, &x) in mean.iter_mut().zip(va.row(r)) {
                *mu += x;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= nn);
        for r in 0..n {
            for ((s, &x), &mu) in var.iter_mut().zip(va.row(r)).zip(&mean) {
                *s += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= nn);
        let inv: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut v = va.clone();
        for r in 0..n {
            for ((x, &mu), &k) in v.row_mut(r).iter_mut().zip(&mean).zip(&inv) {
                *x = (*x - mu) * k;
            }
        }
        let node = self.push(v, Op::Standardize(a, inv), &[a]);
        (node, mean, var)
    }

    /// Per-row Tucker score `Σ_{ijk} W[i,j,k]·hᵢ·rⱼ·tₖ`, shape rows x 1.
    ///
    /// `core` is the `d_c x d_c²` unfolding with `core[(i, j·d_c + k)] = W[i,j,k]`.
    pub fn tucker(&mut self, core: Var, h: Var, r: Var, t: Var) -> Var {
        let w = self.value(core);
        let dc = w.rows();
        assert_eq!(w.cols(), dc * dc, "tucker core must be d_c x d_c^2");
        let (vh, vr, vt) = (self.value(h), self.value(r), self.value(t));
        assert!(vh.cols() == dc && vr.cols() == dc && vt.cols() == dc);
        let v = Matrix::from_fn(vh.rows(), 1, |b, _| {
            tucker::contract_staged(w, vh.row(b), vr.row(b), vt.row(b))
        });
        self.push(v, Op::Tucker { core, h, r, t }, &[core, h, r, t])
    }

    /// Bidirectional InfoNCE over unit rows `z1`, `z2` with temperature `tau`.
    pub fn info_nce(&mut self, z1: Var, z2: Var, tau: T) -> Var {
        let loss = crate::contrastive::info_nce_value(self.value(z1), self.value(z2), tau)
            .expect("info_nce shape");
        self.push(Matrix::scalar(loss), Op::InfoNce(z1, z2, tau), &[z1, z2])
    }

    /// Row-wise spatial part of `exp_o(u)`; tangent norms are clamped to `max_norm`.
    pub fn exp_origin(&mut self, u: Var, cv: Curvature<T>, max_norm: T) -> Var {
        let vu = self.value(u);
        let mut v = vu.clone();
        for r in 0..v.rows() {
            let n = row_norm(vu.row(r));
            let k = exp_coeff(n, cv, max_norm).0;
            v.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        self.push(v, Op::ExpOrigin(u, cv, max_norm), &[u])
    }

    /// Row-wise spatial part of `log_o(y)` computed from spatial coordinates.
    pub fn log_origin(&mut self, y: Var, cv: Curvature<T>) -> Var {
        let vy = self.value(y);
        let mut v = vy.clone();
        for r in 0..v.rows() {
            let k = log_coeff(row_norm(vy.row(r)), cv).0;
            v.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        self.push(v, Op::LogOrigin(y, cv), &[y])
    }

    /// Row-wise geodesic distance between points given by spatial parts.
    pub fn lorentz_dist(&mut self, x: Var, y: Var, cv: Curvature<T>) -> Var {
        assert_eq!(self.shape(x), self.shape(y), "lorentz_dist shape");
        let (vx, vy) = (self.value(x), self.value(y));
        let v = Matrix::from_fn(vx.rows(), 1, |r, _| {
            dist_parts(vx.row(r), vy.row(r), cv).dist
        });
        self.push(v, Op::LorentzDist(x, y, cv), &[x, y])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut slots: Vec<Option<Matrix<T>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[out.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Grads { slots }
    }

    fn accumulate(&self, slots: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Matrix<T>, slots: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, self.value(*a).tmatmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.scale(-T::one()));
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, g.hadamard(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(slots, *a, g.clone());
                if self.needs(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    self.accumulate(slots, *bias, gb);
                }
            }
            Op::MulRows(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = vs[(r, 0)];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(slots, *a, ga);
                }
                if self.needs(*s) {
                    let gs = Matrix::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(va.row(r)).map(|(&x, &y)| x * y).sum()
                    });
                    self.accumulate(slots, *s, gs);
                }
            }
            Op::ScaleBy(a, s) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, g.scale(self.scalar(*s)));
                }
                if self.needs(*s) {
                    let gs = g.hadamard(self.value(*a)).sum();
                    self.accumulate(slots, *s, Matrix::scalar(gs));
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(slots, *a, g.clone());
                if self.needs(*s) {
                    self.accumulate(slots, *s, Matrix::scalar(g.sum()));
                }
            }
            Op::Affine(a, alpha) => self.accumulate(slots, *a, g.scale(*alpha)),
            Op::MulConst(a, m) => self.accumulate(slots, *a, g.hadamard(m)),
            Op::SpMM(s, a) => {
                let ga = s.transposed.spmm(g).expect("spmm adjoint shape");
                self.accumulate(slots, *a, ga);
            }
            Op::Gather(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, &y) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *x += y;
                    }
                }
                self.accumulate(slots, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                if self.needs(*a) {
                    self.accumulate(slots, *a, Matrix::from_fn(g.rows(), ca, |r, c| g[(r, c)]));
                }
                if self.needs(*b) {
                    self.accumulate(
                        slots,
                        *b,
                        Matrix::from_fn(g.rows(), cb, |r, c| g[(r, c + ca)]),
                    );
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(*a), |gg, x| {
                    if x > T::zero() {
                        gg
                    } else {
                        *slope * gg
                    }
                });
                self.accumulate(slots, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gg, y| gg * (T::one() - y * y));
                self.accumulate(slots, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gg, y| gg * y * (T::one() - y));
                self.accumulate(slots, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| gg * sigmoid(-x));
                self.accumulate(slots, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = vb.clone();
                    for r in 0..ga.rows() {
                        let k = g[(r, 0)];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(slots, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = va.clone();
                    for r in 0..gb.rows() {
                        let k = g[(r, 0)];
                        gb.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::RowNormalize(a, eps) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let n = row_norm(va.row(r));
                    let (y, gr) = (out.row(r), g.row(r));
                    if n > *eps {
                        let yg: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o = (gg - yy * yg) / n;
                        }
                    } else {
                        for (o, &gg) in ga.row_mut(r).iter_mut().zip(gr) {
                            *o = gg / *eps;
                        }
                    }
                }
                self.accumulate(slots, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(slots, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = T::from_usize_lossy((r * c).max(1));
                self.accumulate(slots, *a, Matrix::filled(r, c, g.item() / n));
            }
            Op::SumSquares(a) => {
                let k = g.item() * T::lit(2.0);
                self.accumulate(slots, *a, self.value(*a).scale(k));
            }
            Op::Standardize(a, inv) => {
                let (n, m) = out.shape();
                let nn = T::from_usize_lossy(n);
                let mut sum_g = vec![T::zero(); m];
                let mut sum_gy = vec![T::zero(); m];
                for r in 0..n {
                    for c in 0..m {
                        sum_g[c] += g[(r, c)];
                        sum_gy[c] += g[(r, c)] * out[(r, c)];
                    }
                }
                let ga = Matrix::from_fn(n, m, |r, c| {
                    inv[c] / nn * (nn * g[(r, c)] - sum_g[c] - out[(r, c)] * sum_gy[c])
                });
                self.accumulate(slots, *a, ga);
            }
            Op::Tucker { core, h, r, t } => {
                let w = self.value(*core);
                let dc = w.rows();
                let (vh, vr, vt) = (self.value(*h), self.value(*r), self.value(*t));
                let rows = vh.rows();
                let mut gw = Matrix::zeros(dc, dc * dc);
                let mut gh = Matrix::zeros(rows, dc);
                let mut gr = Matrix::zeros(rows, dc);
                let mut gt = Matrix::zeros(rows, dc);
                let mut m = vec![T::zero(); dc * dc];
                for b in 0..rows {
                    let gb = g[(b, 0)];
                    let (hh, rr, tt) = (vh.row(b), vr.row(b), vt.row(b));
                    // m[i,k] = Σ_j W[i,j,k] r_j
                    m.iter_mut().for_each(|x| *x = T::zero());
                    for i in 0..dc {
                        let wrow = w.row(i);
                        for (j, &rj) in rr.iter().enumerate() {
                            let block = &wrow[j * dc..(j + 1) * dc];
                            for (k, &wv) in block.iter().enumerate() {
                                m[i * dc + k] += wv * rj;
                            }
                        }
                    }
                    for i in 0..dc {
                        let mt: T = (0..dc).map(|k| m[i * dc + k] * tt[k]).sum();
                        gh[(b, i)] = gb * mt;
                    }
                    for k in 0..dc {
                        let v: T = (0..dc).map(|i| hh[i] * m[i * dc + k]).sum();
                        gt[(b, k)] = gb * v;
                    }
                    for i in 0..dc {
                        let gbh = gb * hh[i];
                        let wrow = w.row(i);
                        let gwrow = gw.row_mut(i);
                        for j in 0..dc {
                            let mut acc = T::zero();
                            for k in 0..dc {
                                acc += wrow[j * dc + k] * tt[k];
                                gwrow[j * dc + k] += gbh * rr[j] * tt[k];
                            }
                            gr[(b, j)] += gbh * acc;
                        }
                    }
                }
                self.accumulate(slots, *core, gw);
                self.accumulate(slots, *h, gh);
                self.accumulate(slots, *r, gr);
                self.accumulate(slots, *t, gt);
            }
            Op::InfoNce(z1, z2, tau) => {
                let (a, b) = (self.value(*z1), self.value(*z2));
                let ds = crate::contrastive::info_nce_logit_grad(a, b, *tau);
                let k = g.item() / *tau;
                if self.needs(*z1) {
                    self.accumulate(slots, *z1, ds.matmul_unchecked(b).scale(k));
                }
                if self.needs(*z2) {
                    self.accumulate(slots, *z2, ds.tmatmul(a).scale(k));
                }
            }
            Op::ExpOrigin(u, cv, max_norm) => {
                let vu = self.value(*u);
                let mut gu = Matrix::zeros(vu.rows(), vu.cols());
                for r in 0..vu.rows() {
                    let x = vu.row(r);
                    let n = row_norm(x);
                    let (k, dk_over_n) = exp_coeff(n, *cv, *max_norm);
                    let xg: T = x.iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gg), &xx) in gu.row_mut(r).iter_mut().zip(g.row(r)).zip(x) {
                        *o = k * gg + dk_over_n * xg * xx;
                    }
                }
                self.accumulate(slots, *u, gu);
            }
            Op::LogOrigin(y, cv) => {
                let vy = self.value(*y);
                let mut gy = Matrix::zeros(vy.rows(), vy.cols());
                for r in 0..vy.rows() {
                    let x = vy.row(r);
                    let (k, dk_over_n) = log_coeff(row_norm(x), *cv);
                    let xg: T = x.iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gg), &xx) in gy.row_mut(r).iter_mut().zip(g.row(r)).zip(x) {
                        *o = k * gg + dk_over_n * xg * xx;
                    }
                }
                self.accumulate(slots, *y, gy);
            }
            Op::LorentzDist(x, y, cv) => {
                let (vx, vy) = (self.value(*x), self.value(*y));
                let c = cv.c();
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                let mut gy = Matrix::zeros(vy.rows(), vy.cols());
                for r in 0..vx.rows() {
                    let p = dist_parts(vx.row(r), vy.row(r), *cv);
                    if p.zm1 <= T::zero() {
                        continue;
                    }
                    // dd/dz with z - 1 carried separately for accuracy near z = 1.
                    let dd_dz = cv.sqrt_c() / (p.zm1 * (p.zm1 + T::lit(2.0))).sqrt();
                    let k = g[(r, 0)] * dd_dz / c;
                    let (xs, ys) = (vx.row(r), vy.row(r));
                    for ((o, &a), &b) in gx.row_mut(r).iter_mut().zip(xs).zip(ys) {
                        *o = k * (p.y0 / p.x0 * a - b);
                    }
                    for ((o, &b), &a) in gy.row_mut(r).iter_mut().zip(ys).zip(xs) {
                        *o = k * (p.x0 / p.y0 * b - a);
                    }
                }
                self.accumulate(slots, *x, gx);
                self.accumulate(slots, *y, gy);
            }
        }
    }
}

fn row_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// `(k, k'(n)/n)` for `exp_o` spatial: `y = k(n)·u` with
/// `k(n) = √c·sinh(min(n, R)/√c)/n`.
fn exp_coeff<T: Scalar>(n: T, cv: Curvature<T>, max_norm: T) -> (T, T) {
    let c = cv.c();
    let sc = cv.sqrt_c();
    if n > max_norm {
        let psi = sc * (max_norm / sc).sinh();
        // y = psi·u/n  ⇒  k = psi/n, k'/n = -psi/n³
        return (psi / n, -psi / (n * n * n));
    }
    if n < T::lit(1e-3) {
        let n2 = n * n;
        let k = T::one() + n2 / (T::lit(6.0) * c) + n2 * n2 / (T::lit(120.0) * c * c);
        let dk = T::one() / (T::lit(3.0) * c) + n2 / (T::lit(30.0) * c * c);
        return (k, dk);
    }
    let (sh, ch) = ((n / sc).sinh(), (n / sc).cosh());
    let k = sc * sh / n;
    let dk = (n * ch - sc * sh) / (n * n * n);
    (k, dk)
}

/// `(k, k'(n)/n)` for `log_o` spatial: `k(n) = √c·asinh(n/√c)/n`.
fn log_coeff<T: Scalar>(n: T, cv: Curvature<T>) -> (T, T) {
    let c = cv.c();
    let sc = cv.sqrt_c();
    if n < T::lit(1e-3) {
        let n2 = n * n;
        let k = T::one() - n2 / (T::lit(6.0) * c) + T::lit(3.0) * n2 * n2 / (T::lit(40.0) * c * c);
        let dk = -T::one() / (T::lit(3.0) * c) + T::lit(3.0) * n2 / (T::lit(10.0) * c * c);
        return (k, dk);
    }
    let a = (n / sc).asinh();
    let k = sc * a / n;
    let dk = (n / (T::one() + n * n / c).sqrt() - sc * a) / (n * n * n);
    (k, dk)
}

struct DistParts<T> {
    dist: T,
    /// `z - 1` where `z = -⟨x, y⟩_L / c`.
    zm1: T,
    x0: T,
    y0: T,
}

/// Distance via `‖x - y‖_L² = ‖xs - ys‖² - (x₀ - y₀)²`, which keeps precision
/// for nearby points; `z - 1 = ‖x - y‖_L² / (2c)`.
fn dist_parts<T: Scalar>(xs: &[T], ys: &[T], cv: Curvature<T>) -> DistParts<T> {
    let c = cv.c();
    let nx: T = xs.iter().map(|&v| v * v).sum();
    let ny: T = ys.iter().map(|&v| v * v).sum();
    let x0 = (c + nx).sqrt();
    let y0 = (c + ny).sqrt();
    let diff_sq: T = xs.iter().zip(ys).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let cross: T = xs.iter().zip(ys).map(|(&a, &b)| (a - b) * (a + b)).sum();
    let dt = cross / (x0 + y0);
    let l2 = (diff_sq - dt * dt).max(T::zero());
    if l2 <= T::lit(ZERO_NORM * ZERO_NORM) {
        return DistParts {
            dist: T::zero(),
            zm1: T::zero(),
            x0,
            y0,
        };
    }
    let sc = cv.sqrt_c();
    DistParts {
        dist: T::lit(2.0) * sc * (l2.sqrt() / (T::lit(2.0) * sc)).asinh(),
        zm1: l2 / (T::lit(2.0) * c),
        x0,
        y0,
    }
}
