//! Small dense and row-compressed linear algebra used by the QP solver.

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
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
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| crate::num::dot(self.row(i), x))
            .collect()
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (yj, &aij) in y.iter_mut().zip(self.row(i)) {
                *yj += aij * xi;
            }
        }
        y
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// True when only the diagonal carries nonzeros.
    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|i| {
            self.row(i)
                .iter()
                .enumerate()
                .all(|(j, &v)| j == i || v == T::zero())
        })
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Compressed sparse rows; the constraint matrices here are mostly bounds and
/// per-slot balances, so products go through this form.
#[derive(Debug, Clone)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn from_dense(m: &Matrix<T>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != T::zero() {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Stacks two dense matrices with the same column count.
    pub fn stack(top: &Matrix<T>, bottom: &Matrix<T>, cols: usize) -> Self {
        let mut out = Self::from_dense(top);
        out.cols = cols;
        let lower = Self::from_dense(bottom);
        let offset = out.col_idx.len();
        out.col_idx.extend_from_slice(&lower.col_idx);
        out.values.extend_from_slice(&lower.values);
        out.row_ptr
            .extend(lower.row_ptr.iter().skip(1).map(|p| p + offset));
        out.rows += lower.rows;
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Nonzero `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn mul_vec_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).fold(T::zero(), |acc, (j, v)| acc + v * x[j]);
        }
    }

    pub fn tr_mul_vec_into(&self, x: &[T], y: &mut [T]) {
        y.iter_mut().for_each(|v| *v = T::zero());
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
    }

    /// Adds `Aᵀ diag(w) A` into the dense square matrix `out`.
    pub fn add_weighted_gram(&self, w: &[T], out: &mut Matrix<T>) {
        for (i, &wi) in w.iter().enumerate() {
            let span = self.row_ptr[i]..self.row_ptr[i + 1];
            for a in span.clone() {
                let (ja, va) = (self.col_idx[a], self.values[a]);
                for b in span.clone() {
                    let (jb, vb) = (self.col_idx[b], self.values[b]);
                    out[(ja, jb)] += wi * va * vb;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("matrix is not numerically factorizable (pivot {pivot})")]
pub struct FactorError {
    pub pivot: usize,
}

/// `A = L Lᵀ` for symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, FactorError> {
        let n = a.rows();
        assert_eq!(n, a.cols());
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(FactorError { pivot: j });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let (ri, rj) = (i * n, j * n);
                let s = {
                    let data = l.as_slice();
                    crate::num::dot(&data[ri..ri + j], &data[rj..rj + j])
                };
                l[(i, j)] = (a[(i, j)] - s) / d;
            }
        }
        Ok(Self { l })
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.rows();
        for i in 0..n {
            let row = self.l.row(i);
            let s = crate::num::dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }
}

/// `A = L D Lᵀ` without pivoting. Valid for quasi-definite matrices such as a
/// regularized KKT system `[[P + δI, Aᵀ], [A, -δI]]`.
#[derive(Debug, Clone)]
pub struct Ldlt<T> {
    l: Matrix<T>,
    d: Vec<T>,
}

impl<T: Scalar> Ldlt<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, FactorError> {
        let n = a.rows();
        assert_eq!(n, a.cols());
        let mut l = Matrix::identity(n);
        let mut d = vec![T::zero(); n];
        // scratch: w[k] = L[j][k] * d[k]
        let mut w = vec![T::zero(); n];
        for j in 0..n {
            let mut dj = a[(j, j)];
            for k in 0..j {
                w[k] = l[(j, k)] * d[k];
                dj -= l[(j, k)] * w[k];
            }
            if dj == T::zero() || !dj.is_finite() {
                return Err(FactorError { pivot: j });
            }
            d[j] = dj;
            for i in (j + 1)..n {
                let s = crate::num::dot(&l.row(i)[..j], &w[..j]);
                l[(i, j)] = (a[(i, j)] - s) / dj;
            }
        }
        Ok(Self { l, d })
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.d.len();
        for i in 0..n {
            let s = crate::num::dot(&self.l.row(i)[..i], &b[..i]);
            b[i] -= s;
        }
        for (bi, &di) in b.iter_mut().zip(&self.d) {
            *bi /= di;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s;
        }
    }

    /// Number of negative pivots (inertia check for quasi-definite systems).
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|d| **d < T::zero()).count()
    }
}

/// Whether `q + tol·I` admits a Cholesky factorization, i.e. the smallest
/// eigenvalue of `q` is above `-tol`.
pub fn is_psd<T: Scalar>(q: &Matrix<T>, tol: T) -> bool {
    if q.is_diagonal() {
        return (0..q.rows()).all(|i| q[(i, i)] >= -tol);
    }
    let mut shifted = q.clone();
    // tolerance scaled to the matrix magnitude so large entries do not flip the
    // verdict through rounding alone
    let scale = q
        .as_slice()
        .iter()
        .fold(T::one(), |acc, v| acc.max(v.abs()));
    let shift = tol.max(scale * T::epsilon() * T::lit(q.rows().max(1) as f64));
    for i in 0..q.rows() {
        shifted[(i, i)] += shift;
    }
    Cholesky::factor(&shifted).is_ok()
}
