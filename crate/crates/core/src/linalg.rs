//! Small dense symmetric solves shared by the regression and kernel code.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SingularMatrix;

const COND_LIMIT: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-8;

/// Solve `a x = b` for symmetric positive semdefinite `a` (a Gram matrix).
///
/// When the condition estimate exceeds 1e12 a ridge of `1e-8 * trace/dim` is
/// added before solving; the returned flag records whether that happened.
pub(crate) fn solve_sym_ridge(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, bool), SingularMatrix> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    if n == 0 {
        return Err(SingularMatrix);
    }

    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ill = !smax.is_finite() || smin <= 0.0 || smax / smin > COND_LIMIT;

    let mut ridge_used = false;
    let mut m = a.clone();
    if ill {
        let ridge = RIDGE_SCALE * a.trace() / n as f64;
        if ridge <= 0.0 || !ridge.is_finite() {
            return Err(SingularMatrix);
        }
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        ridge_used = true;
    }

    if let Some(chol) = m.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, ridge_used));
        }
    }
    match m.lu().solve(b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok((x, ridge_used)),
        _ => Err(SingularMatrix),
    }
}
