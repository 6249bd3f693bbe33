//! Dense value-semantic containers and the finite-difference gradient oracle.
//!
//! Layout is fixed: `Tensor3` stores `(p, q, c)` row-major with the channel
//! index innermost (`index = (p·W + q)·C + c`), `Matrix` stores rows
//! contiguously. Every reduction in this crate sums in ascending index
//! order, sequentially, so identical inputs produce bit-identical results.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An `H×W×C` activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<F> {
    h: usize,
    w: usize,
    c: usize,
    values: Vec<F>,
}

impl<F: Scalar> Tensor3<F> {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<F>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::dimension(format!(
                "tensor dims must be positive, got {h}x{w}x{c}"
            )));
        }
        if values.len() != h * w * c {
            return Err(Error::dimension(format!(
                "tensor {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                values.len()
            )));
        }
        Ok(Self { h, w, c, values })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            values: vec![F::zero(); h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> F) -> Self {
        let mut values = Vec::with_capacity(h * w * c);
        for p in 0..h {
            for q in 0..w {
                for ch in 0..c {
                    values.push(f(p, q, ch));
                }
            }
        }
        Self { h, w, c, values }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    /// Channel slice at spatial location `(p, q)`.
    pub fn site(&self, p: usize, q: usize) -> &[F] {
        let base = (p * self.w + q) * self.c;
        &self.values[base..base + self.c]
    }

    pub fn at(&self, p: usize, q: usize, c: usize) -> F {
        self.values[(p * self.w + q) * self.c + c]
    }

    pub(crate) fn site_mut(&mut self, p: usize, q: usize) -> &mut [F] {
        let base = (p * self.w + q) * self.c;
        &mut self.values[base..base + self.c]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn map(&self, mut f: impl FnMut(F) -> F) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    values: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dimension(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = F::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    /// Rank-one product `col · rowᵀ` with shape `col.len() × row.len()`.
    pub fn outer(col: &[F], row: &[F]) -> Self {
        Self::from_fn(col.len(), row.len(), |i, j| col[i] * row[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn at_mut(&mut self, i: usize, j: usize) -> &mut F {
        &mut self.values[i * self.cols + j]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[F]) -> Result<Vec<F>> {
        if v.len() != self.cols {
            return Err(Error::dimension(format!(
                "matvec: matrix has {} cols, vector has length {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[F]) -> Result<Vec<F>> {
        if v.len() != self.rows {
            return Err(Error::dimension(format!(
                "tr_matvec: matrix has {} rows, vector has length {}",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] += v[i] * row[j];
            }
        }
        Ok(out)
    }
}

/// Sequential ascending-index dot product.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm<F: Scalar>(v: &[F]) -> F {
    dot(v, v).sqrt()
}

/// `dst += s · src`.
pub(crate) fn axpy<F: Scalar>(dst: &mut [F], src: &[F], s: F) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += s * src[i];
    }
}

/// Central-difference gradient of a scalar-valued function.
///
/// `g[i] = (f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`. This is the oracle
/// every hand-derived backward pass in this crate is certified against; it
/// is only meaningful in double precision at the default `eps = 1e-5`.
pub fn finite_diff_grad<F: Scalar>(
    mut f: impl FnMut(&[F]) -> F,
    x: &[F],
    eps: F,
) -> Result<Vec<F>> {
    if !(eps > F::zero()) || !eps.is_finite() {
        return Err(Error::config(format!("finite_diff_grad: eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    let two = F::from_f64(2.0);
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::OracleFailure { index: i });
        }
        grad.push((hi - lo) / (two * eps));
    }
    Ok(grad)
}

/// `‖a−b‖₂ / max(‖a‖₂, ‖b‖₂, tiny)`; zero when both inputs are zero.
pub fn relative_error<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!(
            "relative_error: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut diff_sq = F::zero();
    for i in 0..a.len() {
        let d = a[i] - b[i];
        diff_sq += d * d;
    }
    let denom = l2_norm(a).max(l2_norm(b)).max(F::min_positive_value());
    Ok(diff_sq.sqrt() / denom)
}
