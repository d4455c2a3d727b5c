//! Small dense symmetric-matrix helpers on top of nalgebra.
//!
//! Everything here operates on d×d matrices with d in the single or low
//! double digits; clarity beats asymptotics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn to_dmatrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("matrix rows of unequal length"));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn check_symmetric(m: &DMatrix<f64>, context: &str) -> Result<()> {
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::invalid(format!("{context}: matrix not symmetric")));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn eigen_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn eigen_max(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().unwrap()
}

/// Symmetric PSD square root. Eigenvalues below `1e-12 * trace` are clamped
/// to zero so near-singular oracle inputs stay well-defined.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m, "sqrtm")?;
    let eig = m.clone().symmetric_eigen();
    let clamp = 1e-12 * m.trace().abs().max(f64::MIN_POSITIVE);
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| if l < clamp { 0.0 } else { l.sqrt() }),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive definite matrix through its eigensystem.
pub fn inv_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m, "inv_spd")?;
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::invalid("inv_spd: matrix not positive definite"));
    }
    let inv = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| 1.0 / l));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Cholesky factor (lower triangular) of a covariance matrix.
///
/// Rejects matrices whose smallest eigenvalue is below `1e-12` times the
/// largest: degenerate covariances are user errors here, not a supported
/// limit case.
pub fn cholesky_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(cov, "covariance")?;
    let vals = sym_eigenvalues(cov);
    let (min, max) = (vals[0], *vals.last().unwrap());
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::NonFinite("covariance eigenvalues".into()));
    }
    if min < 1e-12 * max || min <= 0.0 {
        return Err(Error::invalid(format!(
            "covariance nearly singular: e_min {min:.3e} < 1e-12 * e_max {max:.3e}"
        )));
    }
    nalgebra::Cholesky::new(cov.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::invalid("covariance not positive definite"))
}

pub fn frobenius_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrtm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&m).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sqrtm_psd(&a).unwrap();
        assert!(frobenius_norm(&(&r * &r - &a)) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_degenerate() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_covariance(&m).is_err());
    }

    #[test]
    fn cholesky_accepts_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = cholesky_covariance(&m).unwrap();
        assert!(frobenius_norm(&(&l * l.transpose() - &m)) < 1e-12);
    }

    #[test]
    fn eigen_min_of_collinear_cloud_is_zero() {
        // covariance of points on a line in 2-d
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(eigen_min(&m).abs() < 1e-12);
    }
}
