//! Small Hermitian-matrix helpers shared by the channel and LMMSE modules.

use crate::{C64, CMat, CVec, Error, Result};

/// Tolerance below which a negative eigenvalue is treated as rounding noise.
pub const PSD_EIG_TOL: f64 = 1e-10;

/// Ridge added to a Gram matrix when a factorization fails.
pub const RIDGE: f64 = 1e-12;

/// Hermitian square root via eigendecomposition.
///
/// Eigenvalues in `[-PSD_EIG_TOL, 0)` are clamped to zero; anything more
/// negative is rejected as a non-PSD input.
pub fn hermitian_sqrt(m: &CMat) -> Result<CMat> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dim(format!("hermitian_sqrt: {}x{}", m.nrows(), m.ncols())));
    }
    if n == 0 {
        return Ok(m.clone());
    }
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    // Clamp relative to the spectral scale so rank-deficient matrices stay
    // exactly rank-deficient after the square root.
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = PSD_EIG_TOL * scale;
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Numeric(format!(
                "matrix not PSD: eigenvalue {v:.3e} below tolerance"
            )));
        }
        *v = if *v <= tol { 0.0 } else { v.sqrt() };
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, s) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    Ok(&scaled * eig.eigenvectors.adjoint())
}

/// Minimum eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Solve `A x = b` for Hermitian positive-definite `A` by Cholesky,
/// retrying once with a ridge on the diagonal if the factorization fails.
///
/// Returns the solution and whether regularization was applied.
pub fn hermitian_solve(a: &CMat, b: &CVec) -> Result<(CVec, bool)> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok((chol.solve(b), false));
    }
    let n = a.nrows();
    let ridged = a + CMat::identity(n, n) * C64::new(RIDGE, 0.0);
    match ridged.cholesky() {
        Some(chol) => Ok((chol.solve(b), true)),
        None => Err(Error::Numeric("Hermitian solve failed even with ridge".into())),
    }
}

/// Same as [`hermitian_solve`] but for a matrix right-hand side.
pub fn hermitian_solve_mat(a: &CMat, b: &CMat) -> Result<(CMat, bool)> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok((chol.solve(b), false));
    }
    let n = a.nrows();
    let ridged = a + CMat::identity(n, n) * C64::new(RIDGE, 0.0);
    match ridged.cholesky() {
        Some(chol) => Ok((chol.solve(b), true)),
        None => Err(Error::Numeric("Hermitian solve failed even with ridge".into())),
    }
}

/// Max absolute entry of `A - A^H`, used to validate Hermitian inputs.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let d = m - m.adjoint();
    d.iter().map(|c| c.norm()).fold(0.0, f64::max)
}
