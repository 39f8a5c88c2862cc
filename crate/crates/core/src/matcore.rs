//! Dense real matrices and the few spectral primitives the solvers need.
//!
//! [`Mat`] wraps an `nalgebra` dynamic matrix and enforces finite entries at
//! construction. Arithmetic through the operator impls panics on shape
//! mismatch (as `nalgebra` does); the free functions that sit on a public
//! contract validate shapes and return [`Error::ShapeMismatch`] instead.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITERS: usize = 10_000;

/// Dense real matrix with explicit shape.
#[derive(Clone, PartialEq)]
pub struct Mat(DMatrix<f64>);

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{:?}{}", self.shape(), self.0)
    }
}

impl Mat {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, row_major: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions {
                what: "matrix",
                detail: format!("{rows}x{cols}"),
            });
        }
        if row_major.len() != rows * cols {
            return Err(Error::InvalidDimensions {
                what: "matrix entries",
                detail: format!("expected {} entries, got {}", rows * cols, row_major.len()),
            });
        }
        if row_major.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        Ok(Mat(DMatrix::from_row_slice(rows, cols, row_major)))
    }

    /// Builds a matrix from nested rows. Convenient for small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidDimensions {
                what: "matrix rows",
                detail: "ragged rows".into(),
            });
        }
        let flat: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Mat::new(r, c, &flat)
    }

    pub fn from_inner(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() == 0 || inner.ncols() == 0 {
            return Err(Error::InvalidDimensions {
                what: "matrix",
                detail: format!("{}x{}", inner.nrows(), inner.ncols()),
            });
        }
        if inner.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        Ok(Mat(inner))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        debug_assert!(rows > 0 && cols > 0);
        Mat(DMatrix::from_fn(rows, cols, f))
    }

    /// Zero matrix; either dimension may be 0.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        debug_assert!(n > 0);
        Mat(DMatrix::identity(n, n))
    }

    /// All-ones matrix `J_n`.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Mat(DMatrix::from_element(rows, cols, 1.0))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Mat::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.0[(i, j)] = value;
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }

    /// Sub-matrix made of the given columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Mat {
        Mat(self.0.select_columns(cols))
    }

    pub fn transpose(&self) -> Mat {
        Mat(self.0.transpose())
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat(&self.0 * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    /// Checked product.
    pub fn try_mul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Mat(&self.0 * &rhs.0))
    }

    /// Returns `self * (1 - t) + other * t`.
    pub fn lerp(&self, other: &Mat, t: f64) -> Mat {
        Mat(&self.0 + (&other.0 - &self.0) * t)
    }

    /// Solves `W A = B` for `W` where `A = self` is symmetric positive definite.
    pub fn solve_spd_right(&self, b: &Mat) -> Result<Mat> {
        if !self.is_square() || b.cols() != self.rows() {
            return Err(Error::ShapeMismatch {
                op: "solve_spd_right",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let chol = Cholesky::new(self.0.clone()).ok_or(Error::InvalidParameter {
            name: "system matrix",
            value: f64::NAN,
            reason: "not positive definite",
        })?;
        // A symmetric: W A = B  <=>  A W^T = B^T
        let wt = chol.solve(&b.0.transpose());
        Ok(Mat(wt.transpose()))
    }
}

impl<'a> Add<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn add(self, rhs: &'a Mat) -> Mat {
        Mat(&self.0 + &rhs.0)
    }
}

impl<'a> Sub<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn sub(self, rhs: &'a Mat) -> Mat {
        Mat(&self.0 - &rhs.0)
    }
}

impl<'a> Mul<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn mul(self, rhs: &'a Mat) -> Mat {
        Mat(&self.0 * &rhs.0)
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        Mat(-&self.0)
    }
}

impl Add for Mat {
    type Output = Mat;
    fn add(self, rhs: Mat) -> Mat {
        Mat(self.0 + rhs.0)
    }
}

impl Sub for Mat {
    type Output = Mat;
    fn sub(self, rhs: Mat) -> Mat {
        Mat(self.0 - rhs.0)
    }
}

/// Relative singular-value cutoff used to decide numerical rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdTolerance {
    rel_cutoff: f64,
}

impl SvdTolerance {
    pub fn new(rel_cutoff: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rel_cutoff) {
            return Err(Error::InvalidParameter {
                name: "rel_cutoff",
                value: rel_cutoff,
                reason: "must lie in [0, 1)",
            });
        }
        Ok(SvdTolerance { rel_cutoff })
    }

    pub fn rel_cutoff(&self) -> f64 {
        self.rel_cutoff
    }
}

impl Default for SvdTolerance {
    fn default() -> Self {
        SvdTolerance { rel_cutoff: 1e-12 }
    }
}

fn check_same_shape(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Frobenius inner product `sum_ij a_ij b_ij`.
pub fn frobenius_inner(a: &Mat, b: &Mat) -> Result<f64> {
    check_same_shape("frobenius_inner", a, b)?;
    Ok(a.0.dot(&b.0))
}

/// Eigenpairs of `(a + a^T)/2`.
fn sym_eigen(a: &DMatrix<f64>) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (a + a.transpose()) * 0.5;
    sym.try_symmetric_eigen(EIGEN_EPS, EIGEN_MAX_ITERS)
        .ok_or(Error::DecompositionFailed)
}

/// Moore-Penrose pseudoinverse.
///
/// The singular triplets come from the symmetric eigenproblem of
/// `[[0, A], [A^T, 0]]`, whose eigenpairs are `(+-sigma, [u; +-v]/sqrt 2)`.
/// This keeps the accuracy of a symmetric QR iteration without squaring the
/// condition number. Singular values at or below `rel_cutoff * sigma_max`
/// are treated as zero.
pub fn pinv(a: &Mat, tol: SvdTolerance) -> Result<Mat> {
    if !a.is_finite() {
        return Err(Error::NonFinite { what: "pinv input" });
    }
    let (m, n) = a.shape();
    let mut block = DMatrix::<f64>::zeros(m + n, m + n);
    block.view_mut((0, m), (m, n)).copy_from(&a.0);
    block.view_mut((m, 0), (n, m)).copy_from(&a.0.transpose());
    let eig = sym_eigen(&block)?;
    let sigma_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut out = DMatrix::<f64>::zeros(n, m);
    if sigma_max == 0.0 {
        return Ok(Mat(out));
    }
    let cutoff = tol.rel_cutoff * sigma_max;
    for (k, &s) in eig.eigenvalues.iter().enumerate() {
        if s > cutoff {
            let z = eig.eigenvectors.column(k);
            let u = z.rows(0, m);
            let v = z.rows(m, n);
            // z holds u/sqrt2 and v/sqrt2, so the rank-one term needs a factor 2.
            out += (v * u.transpose()) * (2.0 / s);
        }
    }
    Ok(Mat(out))
}

/// Pseudoinverse of a symmetric matrix from its eigendecomposition.
///
/// The input is symmetrized first, so Gram matrices with round-off asymmetry
/// are accepted. Eigenvalues with `|lambda| <= rel_cutoff * max |lambda|` are
/// treated as zero.
pub fn pinv_sym(a: &Mat, tol: SvdTolerance) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::InvalidDimensions {
            what: "pinv_sym",
            detail: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            what: "pinv_sym input",
        });
    }
    let eig = sym_eigen(&a.0)?;
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let n = a.rows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    if top == 0.0 {
        return Ok(Mat(out));
    }
    let cutoff = tol.rel_cutoff * top;
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > cutoff {
            let q = eig.eigenvectors.column(k);
            out += (q * q.transpose()) / l;
        }
    }
    Ok(Mat(out))
}

/// Orthogonal projector onto `range(x)`, summed from the left singular
/// vectors of `x` so that it is idempotent to round-off.
pub fn projector_range(x: &Mat, tol: SvdTolerance) -> Result<Mat> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: "projector input",
        });
    }
    let (m, n) = x.shape();
    let mut block = DMatrix::<f64>::zeros(m + n, m + n);
    block.view_mut((0, m), (m, n)).copy_from(&x.0);
    block.view_mut((m, 0), (n, m)).copy_from(&x.0.transpose());
    let eig = sym_eigen(&block)?;
    let sigma_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut out = DMatrix::<f64>::zeros(m, m);
    if sigma_max == 0.0 {
        return Ok(Mat(out));
    }
    let cutoff = tol.rel_cutoff * sigma_max;
    for (k, &s) in eig.eigenvalues.iter().enumerate() {
        if s > cutoff {
            let u = eig.eigenvectors.column(k).rows(0, m).into_owned();
            out += (&u * u.transpose()) * 2.0;
        }
    }
    Ok(symmetrize(&Mat(out)))
}

/// Same projector from the eigenvectors of the covariance `X X^T`, keeping
/// eigenvalues above `rel_cutoff` times the largest.
///
/// Equal to [`projector_range`] away from the cutoff; cheaper when `x` has
/// many more columns than rows.
pub fn projector_range_via_cov(x: &Mat, tol: SvdTolerance) -> Result<Mat> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: "projector input",
        });
    }
    let cov = &x.0 * x.0.transpose();
    let eig = sym_eigen(&cov)?;
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let d = x.rows();
    let mut out = DMatrix::<f64>::zeros(d, d);
    if top == 0.0 {
        return Ok(Mat(out));
    }
    let cutoff = tol.rel_cutoff * top;
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let q = eig.eigenvectors.column(k);
            out += q * q.transpose();
        }
    }
    Ok(symmetrize(&Mat(out)))
}

fn symmetrize(p: &Mat) -> Mat {
    Mat((&p.0 + p.0.transpose()) * 0.5)
}

/// Largest eigenvalue of `X X^T`, i.e. `sigma_max(X)^2`.
pub fn op_norm_gram(x: &Mat) -> f64 {
    let smax =
        x.0.singular_values()
            .iter()
            .copied()
            .fold(0.0_f64, f64::max);
    smax * smax
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
pub fn lambda_max_sym(a: &Mat) -> f64 {
    a.0.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(0.0_f64, f64::max)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn eigenvalues_sym(a: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> =
        a.0.clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}
