//! Dense row-major matrix and the handful of kernels the layers need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    /// Builds from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Convenience for literals in tests and fixtures.
    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let owned: Vec<Vec<F>> = rows.iter().map(|r| r.iter().map(|&x| F::lit(x)).collect()).collect();
        Self::from_rows(&owned)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// `self · otherᵀ` where `other` is stored row-major as (n × k) and `self` is (m × k).
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "cannot multiply {:?} by transpose of {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (j, slot) in o.iter_mut().enumerate() {
                *slot = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self · other` with `self` (m × k) and `other` (k × n).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!("cannot multiply {:?} by {:?}", self.shape(), other.shape())));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik != F::zero() {
                    axpy(aik, other.row(k), o);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` with `self` (m × k) and `other` (m × n), giving (k × n).
    pub fn transpose_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply transpose of {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let b = other.row(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik != F::zero() {
                    axpy(aik, b, &mut out.data[k * other.cols..(k + 1) * other.cols]);
                }
            }
        }
        Ok(out)
    }

    /// Column sums as a vector.
    pub fn column_sums(&self) -> Vec<F> {
        let mut s = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            for (acc, &x) in s.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        s
    }
}

/// Inner product with four independent accumulators; the summation order is fixed,
/// so results are reproducible across runs.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = F::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
