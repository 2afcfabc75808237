//! Dense small-matrix linear algebra.
//!
//! Everything here targets the desk-scale regime (dimensions up to a few
//! dozen), so matrices are plain row-major buffers and the factorizations are
//! the textbook ones: Cholesky for SPD systems and cyclic Jacobi for symmetric
//! eigenproblems.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix buffer",
                expected: rows * cols,
                got: data.len(),
            });
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
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
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

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector with the given entries.
    pub fn column(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero; an L=0 matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn col_vec(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn matvec_into(&self, v: &[T], out: &mut [T]) {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        for (o, row) in out.iter_mut().zip(self.iter_rows()) {
            *o = dot(row, v);
        }
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "transposed matvec dimension");
        let mut out = vec![T::zero(); self.cols];
        for (row, &vi) in self.iter_rows().zip(v) {
            axpy(vi, row, &mut out);
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape());
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape());
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip_map(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Largest `|m_ij − m_ji|`.
    pub fn asymmetry(&self) -> T {
        if self.rows != self.cols {
            return T::infinity();
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let half = T::of(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * half
        })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| U::of(a.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y ← y + alpha·x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn sub_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Outer product `a ⊗ b` (a as column, b as row).
pub fn outer<T: Scalar>(a: &[T], b: &[T]) -> Matrix<T> {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = m`.
///
/// Only the lower triangle of `m` is read; symmetry is the caller's concern
/// (see [`SpdMatrix::new`] for the checked entry point).
pub fn cholesky<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::DimensionMismatch {
            what: "cholesky (square)",
            expected: n,
            got: m.cols(),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L·x = b` in place for lower-triangular `L`.
pub fn solve_lower_in_place<T: Scalar>(l: &Matrix<T>, b: &mut [T]) {
    let n = l.rows();
    for i in 0..n {
        let row = l.row(i);
        let mut s = b[i];
        for k in 0..i {
            s = s - row[k] * b[k];
        }
        b[i] = s / row[i];
    }
}

/// Solves `Lᵀ·x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place<T: Scalar>(l: &Matrix<T>, b: &mut [T]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s = s - l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Symmetric positive-definite matrix with its Cholesky factor cached.
///
/// The inverse square root `Γ^{-1/2}` is fixed to `L⁻¹` where `Γ = L·Lᵀ`.
/// Any root with `Γ^{-1/2}·(Γ^{-1/2})ᵀ = Γ⁻¹` gives the same law when applied
/// to isotropic Gaussian increments; pinning the Cholesky one makes runs
/// reproducible bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<T> {
    matrix: Matrix<T>,
    factor: Matrix<T>,
}

impl<T: Scalar> SpdMatrix<T> {
    /// Checks symmetry (1e-12 relative to the largest entry) and factorizes.
    pub fn new(matrix: Matrix<T>) -> Result<Self> {
        let scale = matrix.max_abs().max(T::min_positive_value());
        let asym = matrix.asymmetry();
        let tol = T::of(1e-12).max(T::epsilon() * T::of(16.0));
        if !(asym <= tol * scale) {
            return Err(Error::NotSymmetric {
                asymmetry: asym.as_f64(),
            });
        }
        let factor = cholesky(&matrix)?;
        Ok(Self { matrix, factor })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
            factor: Matrix::identity(n),
        }
    }

    /// `s · I`.
    pub fn scaled_identity(n: usize, s: T) -> Result<Self> {
        Self::new(Matrix::identity(n).scale(s))
    }

    pub fn from_diag(diag: &[T]) -> Result<Self> {
        Self::new(Matrix::from_diag(diag))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    /// Lower Cholesky factor `L`.
    #[inline]
    pub fn factor(&self) -> &Matrix<T> {
        &self.factor
    }

    /// `Γ⁻¹·v`.
    pub fn solve(&self, v: &[T]) -> Vec<T> {
        let mut x = v.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, v: &mut [T]) {
        solve_lower_in_place(&self.factor, v);
        solve_lower_transpose_in_place(&self.factor, v);
    }

    /// `Γ⁻¹·M`, column by column.
    pub fn solve_matrix(&self, m: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for j in 0..m.cols() {
            let x = self.solve(&m.col_vec(j));
            for (i, xi) in x.into_iter().enumerate() {
                out[(i, j)] = xi;
            }
        }
        out
    }

    /// `Γ^{-1/2}·v := L⁻¹·v`.
    pub fn inv_sqrt_apply(&self, v: &[T]) -> Vec<T> {
        let mut x = v.to_vec();
        solve_lower_in_place(&self.factor, &mut x);
        x
    }

    /// `L·v`, the inverse of [`Self::inv_sqrt_apply`].
    pub fn sqrt_apply(&self, v: &[T]) -> Vec<T> {
        self.factor.matvec(v)
    }

    /// `vᵀ·Γ⁻¹·v`.
    pub fn inv_quad_form(&self, v: &[T]) -> T {
        let w = self.inv_sqrt_apply(v);
        dot(&w, &w)
    }

    pub fn inverse(&self) -> Matrix<T> {
        self.solve_matrix(&Matrix::identity(self.dim())).symmetrized()
    }

    pub fn log_det(&self) -> T {
        self.factor
            .diag()
            .into_iter()
            .fold(T::zero(), |acc, d| acc + d.ln())
            * T::of(2.0)
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    /// Eigenvectors stored as columns.
    pub vectors: Matrix<T>,
}

/// Cyclic Jacobi eigen-solver for symmetric matrices.
pub fn symmetric_eigen<T: Scalar>(m: &Matrix<T>) -> SymmetricEigen<T> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigen needs a square matrix");
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let two = T::of(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + a[(i, j)] * a[(i, j)];
            }
        }
        let total = a.frobenius_norm();
        if off.sqrt() <= T::epsilon() * total * T::of(1e-2) || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    SymmetricEigen { values, vectors }
}

/// Reassembles `V·diag(f(λ))·Vᵀ`.
pub fn symmetric_function<T: Scalar>(m: &Matrix<T>, f: impl Fn(T) -> T) -> Matrix<T> {
    let eig = symmetric_eigen(m);
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in eig.values.iter().enumerate() {
        let fl = f(lambda);
        for i in 0..n {
            let vik = eig.vectors[(i, k)] * fl;
            for j in 0..n {
                out[(i, j)] = out[(i, j)] + vik * eig.vectors[(j, k)];
            }
        }
    }
    out.symmetrized()
}

/// Principal square root of a symmetric positive-semidefinite matrix.
/// Slightly negative eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    symmetric_function(m, |l| l.max(T::zero()).sqrt())
}

/// Spectral norm of a symmetric matrix (largest `|λ|`).
pub fn symmetric_spectral_norm<T: Scalar>(m: &Matrix<T>) -> T {
    symmetric_eigen(m)
        .values
        .into_iter()
        .fold(T::zero(), |acc, l| acc.max(l.abs()))
}

/// Spectral norm of a general matrix, via the eigenvalues of `MᵀM`.
pub fn spectral_norm<T: Scalar>(m: &Matrix<T>) -> T {
    let gram = m.transpose().matmul(m);
    symmetric_spectral_norm(&gram).sqrt()
}

/// Singular values of `m`, ascending.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let gram = m.transpose().matmul(m);
    symmetric_eigen(&gram)
        .values
        .into_iter()
        .map(|l| l.max(T::zero()).sqrt())
        .collect()
}
