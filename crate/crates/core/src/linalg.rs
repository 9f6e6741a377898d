//! Dense symmetric helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = f64::EPSILON;
const EIGEN_MAX_ITER: usize = 1_000_000;

/// `(A + Aᵀ) / 2`; the result is exactly symmetric.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Full symmetric eigendecomposition in solver order.
///
/// `None` from the solver is mapped to `Error::Convergence` without a dump;
/// callers that want the matrix on disk attach it themselves.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "eigensolve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let dim = a.nrows();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDegeneracy(
            "non-finite entry in eigensolver input".into(),
        ));
    }
    SymmetricEigen::try_new(a.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .map(|e| (e.eigenvalues, e.eigenvectors))
        .ok_or(Error::Convergence { dim, dump: None })
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn opnorm_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opnorm_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert_eq!(opnorm_sym(&a), 3.0);
    }

    #[test]
    fn symmetrize_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0]);
        let s = symmetrize(&a);
        assert_eq!(s[(0, 1)], 3.0);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn non_square_is_rejected() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(sym_eigen(&a), Err(Error::InvalidArgument(_))));
    }
}
