//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Vectorization is column-major throughout, so that
//! `vec(A X Bᵀ) = (B ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

pub fn vectorize(m: &Mat) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &DVector<f64>, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Relative asymmetry `‖X − Xᵀ‖_F / ‖X‖_F` (zero for the zero matrix).
pub fn asymmetry(m: &Mat) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest singular value.
pub fn sigma_min(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eig_sym(m: &Mat) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eig_sym(m: &Mat) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrt_psd(m: &Mat) -> Mat {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * Mat::from_diagonal(&roots) * v.transpose()
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    m.clone().try_inverse().ok_or_else(|| Error::Singular(format!("{}x{} matrix", m.nrows(), m.ncols())))
}

/// Solve `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &Mat, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone().lu().solve(rhs).ok_or_else(|| Error::Singular(format!("{}x{} system", m.nrows(), m.ncols())))
}

/// Frobenius inner product `⟨X, Y⟩ = Tr(Xᵀ Y)`.
pub fn frob_inner(x: &Mat, y: &Mat) -> f64 {
    x.dot(y)
}

pub fn trace_product(x: &Mat, y: &Mat) -> f64 {
    (x * y).trace()
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}
