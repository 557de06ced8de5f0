//! Small dense symmetric-matrix helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below `-PSD_TOL * max(1, |lambda|_max)` reject a matrix as non-PSD.
pub const PSD_TOL: f64 = 1e-10;

pub fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rtol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    DVector::from_vec(vals)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let vals = sym_eigenvalues(m);
    (vals[0], vals[vals.len() - 1])
}

/// Rebuilds `V diag(f(lambda)) V^T` with eigenvalues clamped at zero first.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mapped = eig.eigenvalues.map(|l| f(l.max(0.0)));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&mapped) * v.transpose()))
}

/// Fails when `m` has an eigenvalue meaningfully below zero.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let vals = sym_eigenvalues(m);
    let scale = vals.amax().max(1.0);
    let min = vals[0];
    if min < -PSD_TOL * scale {
        return Err(Error::invalid(format!(
            "{what} is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, f64::sqrt)
}

/// Projection onto the PSD cone (negative eigenvalues set to zero).
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |l| l)
}
