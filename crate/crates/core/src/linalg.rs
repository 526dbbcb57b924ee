//! Dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter rungs tried in order, relative to the mean diagonal entry.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Cholesky of `m`, retrying with diagonal jitter from `ladder`.
/// Returns the factor and the absolute jitter that was added.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    ladder: &[f64],
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Cholesky::new(DMatrix::zeros(0, 0)).unwrap(), 0.0));
    }
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    for &rung in ladder {
        let jitter = rung * scale;
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                a[(i, i)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "{n}x{n} matrix not positive definite after jitter up to {:e} x mean diagonal",
        ladder.last().copied().unwrap_or(0.0)
    )))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("matrix not positive definite".into()))
}

/// log det of an SPD matrix.
pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let c = Cholesky::new(m.clone())
        .ok_or_else(|| Error::Numerical("matrix not positive definite".into()))?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `0.5 * (m + mᵀ)`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rebuilds a symmetric matrix with every eigenvalue raised to at least `floor`.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// A^{-1/2} for symmetric A, with eigenvalues floored at `rel_floor * trace(A)`.
pub fn inv_sqrt(a: &DMatrix<f64>, rel_floor: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let floor = rel_floor * a.trace().abs();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0 && floor == 0.0) {
        return Err(Error::Numerical(
            "A is not positive definite and has zero trace".into(),
        ));
    }
    let vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}
