//! Dense row-major matrices and the handful of factorizations the models need.
//!
//! Products go through `matrixmultiply`'s packed dgemm kernel; Cholesky and the
//! triangular solves are blocked so their bulk also runs through dgemm.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Adds `v` to every diagonal entry of a square matrix.
    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }
}

/// Strided view over a slice, used to feed dgemm without copies.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix) -> Self {
        Self::row_major(&m.data, m.rows, m.cols)
    }

    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
///
/// When `beta == 0` the previous contents of `c` are ignored.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the views were bounds-checked on construction and `c` holds at
    // least m*n elements; the output does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, &mut c.data);
    Ok(c)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.rows != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, View::of(a).t(), View::of(b), 0.0, &mut c.data);
    Ok(c)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.cols {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, View::of(a), View::of(b).t(), 0.0, &mut c.data);
    Ok(c)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const BLOCK: usize = 64;

fn check_square(op: &'static str, a: &Matrix) -> Result<(), TensorError> {
    if a.rows != a.cols {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: (a.cols, a.rows),
        });
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `L·Lᵀ = a`.
///
/// The input must be symmetric to within `1e-10` (relative to its largest
/// entry); only its lower triangle is read after that check.
pub fn cholesky(a: &Matrix) -> Result<Matrix, TensorError> {
    check_square("cholesky", a)?;
    let n = a.rows;
    let scale = a.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            let diff = (a.get(i, j) - a.get(j, i)).abs();
            if diff > 1e-10 * scale || diff.is_nan() {
                return Err(TensorError::NotSymmetric {
                    row: i,
                    col: j,
                    diff,
                });
            }
        }
    }

    let mut l = a.data.clone();
    for k0 in (0..n).step_by(BLOCK) {
        let kb = BLOCK.min(n - k0);
        let k1 = k0 + kb;

        // Diagonal block: trailing updates from earlier panels are already applied.
        for i in k0..k1 {
            for j in k0..=i {
                let s = l[i * n + j] - dot(&l[i * n + k0..i * n + j], &l[j * n + k0..j * n + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(TensorError::NotPositiveDefinite { index: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }

        // Panel below the diagonal block.
        for i in k1..n {
            for j in k0..k1 {
                let s = l[i * n + j] - dot(&l[i * n + k0..i * n + j], &l[j * n + k0..j * n + j]);
                l[i * n + j] = s / l[j * n + j];
            }
        }

        // Trailing update of the lower triangle, one block row at a time.
        let base = l.as_mut_ptr();
        for r0 in (k1..n).step_by(BLOCK) {
            let rb = BLOCK.min(n - r0);
            let width = r0 + rb - k1;
            // SAFETY: C covers columns >= k1 while both inputs read columns in
            // [k0, k1); all offsets stay inside the n*n buffer.
            unsafe {
                matrixmultiply::dgemm(
                    rb,
                    kb,
                    width,
                    -1.0,
                    base.add(r0 * n + k0),
                    n as isize,
                    1,
                    base.add(k1 * n + k0),
                    1,
                    n as isize,
                    1.0,
                    base.add(r0 * n + k1),
                    n as isize,
                    1,
                );
            }
        }
    }

    for i in 0..n {
        for j in i + 1..n {
            l[i * n + j] = 0.0;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: n,
        data: l,
    })
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    check_square("solve_lower", l)?;
    if l.rows != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "solve_lower",
            left: l.shape(),
            right: b.shape(),
        });
    }
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    for i in 0..n {
        let (done, rest) = x.data.split_at_mut(i * m);
        let xi = &mut rest[..m];
        for k in 0..i {
            let lik = l.data[i * n + k];
            if lik != 0.0 {
                axpy(-lik, &done[k * m..(k + 1) * m], xi);
            }
        }
        let d = l.data[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    Ok(x)
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_upper_transposed(l: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    check_square("solve_upper_transposed", l)?;
    if l.rows != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "solve_upper_transposed",
            left: l.shape(),
            right: b.shape(),
        });
    }
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    for i in (0..n).rev() {
        let (head, tail) = x.data.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..];
        for k in i + 1..n {
            let lki = l.data[k * n + i];
            if lki != 0.0 {
                axpy(-lki, &tail[(k - i - 1) * m..(k - i) * m], xi);
            }
        }
        let d = l.data[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    Ok(x)
}

/// Solves `(L·Lᵀ)·x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    let y = solve_lower(l, b)?;
    solve_upper_transposed(l, &y)
}

/// Inverse of a lower-triangular matrix (itself lower-triangular).
pub fn invert_lower(l: &Matrix) -> Result<Matrix, TensorError> {
    check_square("invert_lower", l)?;
    let n = l.rows;
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        let (done, rest) = inv.data.split_at_mut(i * n);
        let row = &mut rest[..n];
        row[i] = 1.0;
        for k in 0..i {
            let lik = l.data[i * n + k];
            if lik != 0.0 {
                // Row k of the inverse is zero beyond column k.
                axpy(-lik, &done[k * n..k * n + k + 1], &mut row[..k + 1]);
            }
        }
        let d = l.data[i * n + i];
        for v in row[..=i].iter_mut() {
            *v /= d;
        }
    }
    Ok(inv)
}

/// `(L·Lᵀ)⁻¹` from the Cholesky factor.
pub fn cholesky_inverse(l: &Matrix) -> Result<Matrix, TensorError> {
    let linv = invert_lower(l)?;
    let n = l.rows;
    let mut out = Matrix::zeros(n, n);
    gemm(1.0, View::of(&linv).t(), View::of(&linv), 0.0, &mut out.data);
    // Symmetrize away the rounding asymmetry of the product.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out.data[i * n + j] + out.data[j * n + i]);
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    Ok(out)
}

/// `ln |L·Lᵀ|` from the Cholesky factor.
pub fn cholesky_log_det(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
