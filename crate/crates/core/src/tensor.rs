//! Dense row-major matrices and the handful of kernels the fusion layer needs.
//!
//! Shapes are never coerced: the only broadcast is the per-row bias in
//! [`linear`]. Everything else that disagrees in shape is an
//! [`Error::DimensionMismatch`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Plain vector of scalars.
pub type Vector<T = f64> = Vec<T>;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(shape_err(
                "col_block",
                format!("block end <= {}", self.cols),
                format!("{}", start + width),
            ));
        }
        Ok(Self::from_fn(self.rows, width, |i, j| self.get(i, start + j)))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix<T>) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(shape_err(
                "set_col_block",
                format!("{} rows, end <= {}", self.rows, self.cols),
                format!("{} rows, end {}", block.rows, start + block.cols),
            ));
        }
        for i in 0..self.rows {
            for j in 0..block.cols {
                self.set(i, start + j, block.get(i, j));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_t",
                format!("{} columns on both sides", self.cols),
                format!("{}", other.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(shape_err(
                "t_matmul",
                format!("{} rows on both sides", self.rows),
                format!("{}", other.rows),
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aik) in a.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                let dst = out.row_mut(i);
                for (d, &bkj) in dst.iter_mut().zip(b) {
                    *d += aik * bkj;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            format!("rhs rows {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == T::zero() {
                continue;
            }
            let src = b.row(k);
            let dst = out.row_mut(i);
            for (d, &bkj) in dst.iter_mut().zip(src) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `x·w`, plus `b` added to every row when given.
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&[T]>) -> Result<Matrix<T>> {
    let mut out = matmul(x, w)?;
    if let Some(b) = b {
        if b.len() != w.cols {
            return Err(shape_err(
                "linear",
                format!("bias of length {}", w.cols),
                format!("{}", b.len()),
            ));
        }
        for i in 0..out.rows {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(b) {
                *o += bj;
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Row-stacks matrices in input order.
pub fn concat_rows<T: Scalar>(ms: &[Matrix<T>]) -> Result<Matrix<T>> {
    let Some(first) = ms.first() else {
        return Err(Error::InvalidArgument("concat_rows of an empty list".into()));
    };
    let cols = first.cols;
    let mut data = Vec::with_capacity(ms.iter().map(|m| m.data.len()).sum());
    let mut rows = 0;
    for m in ms {
        if m.cols != cols {
            return Err(shape_err(
                "concat_rows",
                format!("{cols} columns"),
                format!("{} columns", m.cols),
            ));
        }
        data.extend_from_slice(&m.data);
        rows += m.rows;
    }
    Ok(Matrix { rows, cols, data })
}

/// Inverse of [`concat_rows`]: splits into blocks with the given row counts.
pub fn split_rows<T: Scalar>(m: &Matrix<T>, sizes: &[usize]) -> Result<Vec<Matrix<T>>> {
    let total: usize = sizes.iter().sum();
    if total != m.rows {
        return Err(shape_err(
            "split_rows",
            format!("sizes summing to {}", m.rows),
            format!("{total}"),
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(Matrix {
            rows: n,
            cols: m.cols,
            data: m.data[start * m.cols..(start + n) * m.cols].to_vec(),
        });
        start += n;
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function.
pub fn central_finite_diff<T, F>(mut f: F, x: &[T], h: T) -> Result<Vector<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let two_h = h + h;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("central_finite_diff"));
        }
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}
