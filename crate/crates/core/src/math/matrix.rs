use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::math::kernel::{product, Band, Lhs};
use crate::real::Real;

/// Dense row-major matrix. Rows index tokens wherever a matrix stacks
/// per-token vectors.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from literal rows, e.g. `Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])`.
    pub fn from_rows<const N: usize>(rows: &[[T; N]]) -> Self {
        Matrix {
            rows: rows.len(),
            cols: N,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Single-column matrix from a vector.
    pub fn column(v: &[T]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Outer product `a b^T`.
    pub fn outer(a: &[T], b: &[T]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj;
            }
        }
        m
    }

    pub fn diag(v: &[T]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set_row(&mut self, i: usize, values: &[T]) {
        self.row_mut(i).copy_from_slice(values);
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Writes `block` into rows `start..start + block.rows()`.
    pub fn set_rows(&mut self, start: usize, block: &Matrix<T>) {
        assert_eq!(block.cols, self.cols, "set_rows: column mismatch");
        self.data[start * self.cols..(start + block.rows) * self.cols].copy_from_slice(&block.data);
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let mut out = Self::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_cols(&mut self, start: usize, block: &Matrix<T>) {
        assert_eq!(block.rows, self.rows, "set_cols: row mismatch");
        for i in 0..self.rows {
            let cols = self.cols;
            self.data[i * cols + start..i * cols + start + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Pointwise combination of two same-shape matrices.
    ///
    /// # Panics
    /// On shape mismatch.
    pub fn zip_map(&self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map: shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Matrix<T>) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self -= other`.
    pub fn sub_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "sub_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    /// Keeps entries with `j - i <= offset`; `offset = -1` gives the strictly
    /// lower part, `0` the lower part including the diagonal.
    pub fn tril(&self, offset: isize) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j as isize - i as isize > offset {
                    out.data[i * self.cols + j] = T::zero();
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |m: f64, &x| m.max(x.as_f64().abs()))
    }

    /// `max |self - other|`, computed in binary64.
    ///
    /// # Panics
    /// On shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m: f64, (&a, &b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64()).sum()
    }

    /// Converts to another precision (rounding when narrowing).
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::cast(x.as_f64())).collect(),
        }
    }

    /// `self · b` in input precision, k ascending.
    ///
    /// # Panics
    /// If `self.cols() != b.rows()`.
    pub fn dot(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, b.rows, "dot: {:?} x {:?}", self.shape(), b.shape());
        let data = product(Lhs::rows(&self.data, self.cols), &b.data, self.rows, self.cols, b.cols, Band::Dense);
        Matrix {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    /// `self^T · b`.
    ///
    /// # Panics
    /// If `self.rows() != b.rows()`.
    pub fn t_dot(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, b.rows, "t_dot: {:?}^T x {:?}", self.shape(), b.shape());
        let data = product(Lhs::transposed(&self.data, self.cols), &b.data, self.cols, self.rows, b.cols, Band::Dense);
        Matrix {
            rows: self.cols,
            cols: b.cols,
            data,
        }
    }

    /// `self · b^T`.
    ///
    /// # Panics
    /// If `self.cols() != b.cols()`.
    pub fn dot_t(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, b.cols, "dot_t: {:?} x {:?}^T", self.shape(), b.shape());
        self.dot(&b.transpose())
    }

    /// `self · b` for lower-triangular `self`, skipping the structural zeros.
    pub(crate) fn lower_dot(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, b.rows, "lower_dot: {:?} x {:?}", self.shape(), b.shape());
        let data = product(Lhs::rows(&self.data, self.cols), &b.data, self.rows, self.cols, b.cols, Band::LowerLhs);
        Matrix {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    /// `tril(self · b^T, offset)` for `offset ∈ {−1, 0}`; entries above the
    /// band are never computed.
    pub(crate) fn dot_t_lower(&self, b: &Matrix<T>, offset: isize) -> Matrix<T> {
        assert_eq!(self.cols, b.cols, "dot_t_lower: {:?} x {:?}^T", self.shape(), b.shape());
        let bt = b.transpose();
        let data = product(Lhs::rows(&self.data, self.cols), &bt.data, self.rows, self.cols, b.rows, Band::LowerOut);
        Matrix {
            rows: self.rows,
            cols: b.rows,
            data,
        }
        .tril(offset)
    }

    /// `self^T · v` for a vector `v` of length `rows`.
    pub fn t_dot_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "t_dot_vec: length mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (k, &vk) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(k)) {
                *o += m * vk;
            }
        }
        out
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn dot_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "dot_vec: length mismatch");
        (0..self.rows).map(|i| dot_slices(self.row(i), v)).collect()
    }
}

/// Sequential inner product, index ascending.
#[inline]
pub(crate) fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(16) {
            let row: Vec<String> = self.data[i * self.cols..(i + 1) * self.cols]
                .iter()
                .take(16)
                .map(|x| format!("{x:?}"))
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tril_offsets() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        assert_eq!(
            m.tril(-1),
            Matrix::from_rows(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [7.0, 8.0, 0.0]])
        );
        assert_eq!(
            m.tril(0),
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [4.0, 5.0, 0.0], [7.0, 8.0, 9.0]])
        );
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [2.0, 1.0]]);
        let b = Matrix::from_rows(&[[4.0, 1.0], [-1.0, 2.0], [0.0, 3.0]]);
        assert_eq!(a.t_dot(&b), a.transpose().dot(&b));
        assert_eq!(a.dot_t(&b), a.dot(&b.transpose()));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Matrix::<f64>::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
