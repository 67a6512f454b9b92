//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{GspsError, Result};

/// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    SymmetricEigen::new(a.clone())
}

/// `Q diag(f(lambda)) Q^T`.
/// Eigenvectors (columns) and eigenvalues of a symmetric matrix via faer.
pub fn sym_eigen_fast(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let f = faer::MatRef::from_column_major_slice(a.as_slice(), n, n);
    match f.self_adjoint_eigen(faer::Side::Lower) {
        Ok(eig) => {
            let u = eig.U();
            let s = eig.S().column_vector();
            (DMatrix::from_fn(n, n, |i, j| u[(i, j)]), DVector::from_fn(n, |i, _| s[i]))
        }
        Err(_) => {
            let eig = nalgebra::SymmetricEigen::new(a.clone());
            (eig.eigenvectors, eig.eigenvalues)
        }
    }
}

pub fn reconstruct(q: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    let mut out = scaled * q.transpose();
    symmetrize_in_place(&mut out);
    out
}

/// Symmetric square root of a PSD matrix. Eigenvalues in `(-tol, 0)` are
/// clamped to zero; anything more negative is rejected.
pub fn psd_sqrt(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(a);
    let min = eig.eigenvalues.min();
    if !min.is_finite() || min < -tol {
        return Err(GspsError::NotPositiveDefinite(format!(
            "minimum eigenvalue {min:e} below -{tol:e}"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(reconstruct(&eig.eigenvectors, &roots))
}

pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| GspsError::NotPositiveDefinite("Cholesky factorization failed".into()))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(a)?.inverse();
    symmetrize_in_place(&mut inv);
    Ok(inv)
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn all_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Largest absolute eigenvalue.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let eig = sym_eigen(a);
    eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Spectral norm of a general (possibly asymmetric) square matrix.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().max()
}
