//! Small dense linear-algebra helpers shared by the estimator and the
//! trust-region solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{FoamError, Result};

/// Settings for the conjugate-gradient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub max_iter: usize,
    /// Relative residual tolerance, `‖r‖ ≤ tol·‖b‖`.
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A` given only its
/// action `matvec`.
pub fn conjugate_gradient<F>(matvec: F, b: &DVector<f64>, cfg: CgConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let mut x = DVector::zeros(n);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r);
    let target = cfg.tol * b_norm;
    for _ in 0..cfg.max_iter {
        let ap = matvec(&p);
        let denom = p.dot(&ap);
        if denom <= 0.0 || !denom.is_finite() {
            return Err(FoamError::CgNonConvergence {
                iterations: 0,
                residual: rs_old.sqrt(),
            });
        }
        let alpha = rs_old / denom;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= target {
            return Ok(x);
        }
        p = &r + (rs_new / rs_old) * &p;
        rs_old = rs_new;
    }
    // Recompute the true residual; accumulated round-off can leave the
    // recursive residual slightly pessimistic.
    let true_res = (b - matvec(&x)).norm();
    if true_res <= target * 10.0 {
        return Ok(x);
    }
    Err(FoamError::CgNonConvergence {
        iterations: cfg.max_iter,
        residual: true_res / b_norm,
    })
}

/// Cholesky-based inverse for a small symmetric matrix. Returns `None` when
/// the matrix is not numerically positive definite.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Symmetric eigenvalues, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}
