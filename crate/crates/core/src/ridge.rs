//! Closed-form ridge regression shared by the trajectory predictor and the
//! learned dynamics models.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Solves `(XᵀX + λI) B = XᵀY` for `B` (features × outputs).
///
/// Falls back to an SVD least-squares solve when the normal matrix is not
/// positive definite (e.g. λ = 0 with collinear features), which yields the
/// minimum-norm solution.
pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::contract(format!(
            "{} feature rows vs {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "ridge lambda must be >= 0, got {lambda}"
        )));
    }
    let mut gram = x.tr_mul(x);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = x.tr_mul(y);
    if lambda > 0.0 {
        if let Some(chol) = gram.clone().cholesky() {
            return Ok(chol.solve(&rhs));
        }
    }
    let eps = 1e-12 * gram.amax().max(1.0);
    gram.svd(true, true)
        .solve(&rhs, eps)
        .map_err(|e| Error::config(format!("ridge solve failed: {e}")))
}

/// Per-column residual standard deviation, floored at [`SIGMA_FLOOR`].
pub fn residual_std(residuals: &DMatrix<f64>) -> Vec<f64> {
    let n = residuals.nrows().max(1) as f64;
    residuals
        .column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            var.sqrt().max(SIGMA_FLOOR)
        })
        .collect()
}
