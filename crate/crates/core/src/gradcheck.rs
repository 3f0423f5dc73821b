//! Central finite differences for checking analytic gradients of scalar
//! functions of a token matrix.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Denominator floor of the relative error, `|a - n| / max(|a|, |n|, floor)`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Step sizes tried by [`check_gradient`]; the better one is reported.
pub const DEFAULT_STEPS: [f64; 2] = [1e-4, 1e-5];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Step size that produced `max_relative_error`.
    pub step: f64,
    /// `(row, col)` of the worst coordinate.
    pub worst: (usize, usize),
}

/// Numerical gradient of `f` at `at` by central differences with step `h`.
///
/// Coordinates are evaluated in parallel; each one is independent, so the
/// result does not depend on scheduling.
pub fn central_difference<F>(f: F, at: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    let (rows, cols) = at.shape();
    let grads: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / cols, idx % cols);
            let mut probe = at.clone();
            let x = at[(i, j)];
            probe[(i, j)] = x + h;
            let plus = f(&probe);
            probe[(i, j)] = x - h;
            let minus = f(&probe);
            (plus - minus) / (2.0 * h)
        })
        .collect();
    Matrix::new(rows, cols, grads).expect("gradient buffer matches shape")
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against central differences of `f` for each step in
/// `steps` and keeps the step with the smallest maximum relative error.
pub fn check_gradient<F>(f: F, analytic: &Matrix, at: &Matrix, steps: &[f64]) -> Result<GradCheckReport>
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    if analytic.shape() != at.shape() {
        return Err(Error::Dimension {
            op: "check_gradient",
            left: analytic.shape(),
            right: at.shape(),
        });
    }
    if steps.is_empty() || steps.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::InvalidParameter("finite-difference steps must be positive".into()));
    }
    let mut best: Option<GradCheckReport> = None;
    for &h in steps {
        let numeric = central_difference(&f, at, h);
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            step: h,
            worst: (0, 0),
        };
        for i in 0..at.rows() {
            for j in 0..at.cols() {
                let (a, n) = (analytic[(i, j)], numeric[(i, j)]);
                let rel = relative_error(a, n);
                report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
                if rel > report.max_relative_error || rel.is_nan() {
                    report.max_relative_error = rel;
                    report.worst = (i, j);
                }
            }
        }
        if best
            .as_ref()
            .is_none_or(|b| report.max_relative_error < b.max_relative_error)
        {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one step"))
}
