//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e13;

/// Solves `a x = b` by LU with partial pivoting, rejecting singular or
/// badly conditioned systems.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let inverse = lu
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("zero pivot".into()))?;
    let cond = norm_1(a) * norm_1(&inverse);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::SingularSystem(format!("condition number {cond:e}")));
    }
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::SingularSystem("zero pivot".into()))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem("non-finite solution".into()))
    }
}

/// Induced 1-norm (max absolute column sum).
pub fn norm_1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Infinity norm of a vector.
pub fn norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Largest eigenvalue modulus.
///
/// The unshifted Schur iteration can stall on matrices whose eigenvalues
/// share a modulus (permutations, for instance), so the iteration is capped
/// and retried on `a + cI` for a few shifts `c`, mapping the eigenvalues
/// back. Gelfand's formula is the last resort.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let scale = norm_1(a).max(f64::MIN_POSITIVE);
    for shift in [0.0, 0.1373, -0.2719, 0.4142] {
        let c = shift * scale;
        let m = a + DMatrix::identity(n, n) * c;
        if let Some(schur) = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, SCHUR_MAX_ITER) {
            return schur
                .complex_eigenvalues()
                .iter()
                .map(|z| (z - c).norm())
                .fold(0.0, f64::max);
        }
    }
    gelfand_radius(a)
}

/// `lim ‖Aᵏ‖^{1/k}` by repeated squaring with rescaling.
fn gelfand_radius(a: &DMatrix<f64>) -> f64 {
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    let mut estimate = norm_1(a);
    for _ in 0..40 {
        let norm = norm_1(&m);
        if norm == 0.0 {
            return 0.0;
        }
        estimate = ((norm.ln() + log_scale) / k).exp();
        m /= norm;
        log_scale = 2.0 * (log_scale + norm.ln());
        m = &m * &m;
        k *= 2.0;
    }
    estimate
}

/// Eigenvalues of the symmetric part `(a + aᵀ) / 2`, ascending.
pub fn symmetric_part_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

pub fn diag(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_of_permutation() {
        let mut p = DMatrix::<f64>::zeros(3, 3);
        for s in 0..3 {
            p[(s, (s + 1) % 3)] = 1.0;
        }
        assert!((spectral_radius(&p) - 1.0).abs() < 1e-9);
        assert!((spectral_radius(&(p * 0.5)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gelfand_matches_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.1, 0.2]);
        assert!((gelfand_radius(&a) - spectral_radius(&a)).abs() < 1e-9);
    }

    #[test]
    fn solve_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(solve(&a, &b).unwrap(), b);
    }

    #[test]
    fn singular_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(solve(&a, &b), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }
}
