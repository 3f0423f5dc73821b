//! Discrete nonlocal smoothing functional and its fidelity-regularised
//! extension.
//!
//! With tokens `u_1..u_N` and nonnegative affinities `w_ij`:
//!
//! ```text
//! J(u)    = 1/2 sum_i sum_j |u_i - u_j|^2 w_ij
//! G(u, f) = lambda/2 sum_i |u_i - f_i|^2
//! E       = J + G
//! ```
//!
//! One forward-Euler step on `J` with the per-token step
//! `dt_i = 1 / sum_j (w_ij + w_ji)` is a row-normalised average with the
//! symmetrised kernel `K = w + w^T`. With `w_ij = exp(k_i . k_j / sqrt(D_qk))`
//! that average is exactly symmetric softmax attention. All sums run over
//! every token, the self-pair included.

use crate::attention::{attention_scores, check_lambda_tilde};
use crate::error::{Error, Result};
use crate::linalg::{mix_rows, squared_distance, Matrix, TokenMatrix};

/// Nonnegative `N x N` affinity matrix `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    w: Matrix,
}

impl KernelWeights {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::Dimension {
                op: "KernelWeights (square)",
                left: w.shape(),
                right: (w.cols(), w.rows()),
            });
        }
        if let Some(row) = w.first_non_finite_row() {
            return Err(Error::NonFinite {
                op: "KernelWeights",
                row,
            });
        }
        if let Some(pos) = w.as_slice().iter().position(|&x| x < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel weight ({}, {}) is negative",
                pos / w.cols(),
                pos % w.cols()
            )));
        }
        Ok(Self { w })
    }

    /// `w_ij = exp(q_i . k_j / sqrt(D_qk))`, the unnormalised attention kernel.
    pub fn exp_scores(q: &TokenMatrix, k: &TokenMatrix) -> Result<Self> {
        Self::new(attention_scores(q, k)?.map(f64::exp))
    }

    pub fn len(&self) -> usize {
        self.w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.rows() == 0
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    /// `K_ij = w_ij + w_ji`; exactly symmetric since `+` commutes.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.len(), |i, j| self.w[(i, j)] + self.w[(j, i)])
    }

    fn check_tokens(&self, u: &TokenMatrix, op: &'static str) -> Result<()> {
        if u.rows() != self.len() {
            return Err(Error::Dimension {
                op,
                left: u.shape(),
                right: self.w.shape(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub j_value: f64,
    pub g_value: f64,
    pub e_value: f64,
    pub lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "fidelity weight must be finite and nonnegative, got {lambda}"
        )))
    }
}

fn check_same_shape(u: &TokenMatrix, f: &TokenMatrix, op: &'static str) -> Result<()> {
    if u.shape() != f.shape() {
        return Err(Error::Dimension {
            op,
            left: u.shape(),
            right: f.shape(),
        });
    }
    Ok(())
}

/// `J(u) = 1/2 sum_ij |u_i - u_j|^2 w_ij`.
pub fn functional_j(u: &TokenMatrix, kernel: &KernelWeights) -> Result<f64> {
    kernel.check_tokens(u, "functional_j")?;
    let w = kernel.weights();
    let mut total = 0.0;
    for i in 0..u.rows() {
        for j in 0..u.rows() {
            total += squared_distance(u.row(i), u.row(j)) * w[(i, j)];
        }
    }
    Ok(0.5 * total)
}

/// `(grad J)_i = sum_j (u_i - u_j)(w_ij + w_ji)`.
pub fn grad_j(u: &TokenMatrix, kernel: &KernelWeights) -> Result<TokenMatrix> {
    kernel.check_tokens(u, "grad_j")?;
    let k = kernel.symmetrized();
    let mut g = Matrix::zeros(u.rows(), u.cols());
    for i in 0..u.rows() {
        for j in 0..u.rows() {
            let kij = k[(i, j)];
            let (ui, uj) = (u.row(i), u.row(j));
            for (c, out) in g.row_mut(i).iter_mut().enumerate() {
                *out += (ui[c] - uj[c]) * kij;
            }
        }
    }
    Ok(g)
}

/// `G(u, f) = lambda/2 sum_i |u_i - f_i|^2`.
pub fn fidelity_g(u: &TokenMatrix, f: &TokenMatrix, lambda: f64) -> Result<f64> {
    check_same_shape(u, f, "fidelity_g")?;
    check_lambda(lambda)?;
    let total: f64 = u.row_iter().zip(f.row_iter()).map(|(a, b)| squared_distance(a, b)).sum();
    Ok(0.5 * lambda * total)
}

/// `(grad G)_i = lambda (u_i - f_i)`.
pub fn grad_g(u: &TokenMatrix, f: &TokenMatrix, lambda: f64) -> Result<TokenMatrix> {
    check_same_shape(u, f, "grad_g")?;
    check_lambda(lambda)?;
    Ok(u.sub(f)?.scale(lambda))
}

pub fn energy(u: &TokenMatrix, f: &TokenMatrix, kernel: &KernelWeights, lambda: f64) -> Result<EnergyReport> {
    let j_value = functional_j(u, kernel)?;
    let g_value = fidelity_g(u, f, lambda)?;
    Ok(EnergyReport {
        j_value,
        g_value,
        e_value: j_value + g_value,
        lambda,
    })
}

fn positive_row_sums(k: &Matrix, op: &'static str) -> Result<Vec<f64>> {
    let sums = k.row_sums();
    if let Some(row) = sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroRowSum { op, row });
    }
    Ok(sums)
}

/// `dt_i = 1 / sum_j (w_ij + w_ji)`.
pub fn adaptive_step_sizes(kernel: &KernelWeights) -> Result<Vec<f64>> {
    let sums = positive_row_sums(&kernel.symmetrized(), "adaptive_step_sizes")?;
    Ok(sums.into_iter().map(|s| 1.0 / s).collect())
}

/// Rows of `k` divided by their sums, applied to `u`.
fn normalized_smoothing(k: &Matrix, sums: &[f64], u: &TokenMatrix) -> TokenMatrix {
    mix_rows(u, |i, j| k[(i, j)] / sums[i])
}

/// One adaptive-step Euler step on `J`: `u_i <- sum_j K_ij u_j / sum_j K_ij`.
pub fn euler_step_j(u: &TokenMatrix, kernel: &KernelWeights) -> Result<TokenMatrix> {
    kernel.check_tokens(u, "euler_step_j")?;
    let k = kernel.symmetrized();
    let sums = positive_row_sums(&k, "euler_step_j")?;
    Ok(normalized_smoothing(&k, &sums, u))
}

/// One Euler step on `E = J + G` with `lambda = lambda_tilde / dt_i`:
/// the smoothing step plus `lambda_tilde (f - u)`.
pub fn euler_step_e(
    u: &TokenMatrix,
    f: &TokenMatrix,
    kernel: &KernelWeights,
    lambda_tilde: f64,
) -> Result<TokenMatrix> {
    check_same_shape(u, f, "euler_step_e")?;
    check_lambda_tilde(lambda_tilde)?;
    let smoothed = euler_step_j(u, kernel)?;
    if lambda_tilde == 0.0 {
        return Ok(smoothed);
    }
    smoothed.add(&f.sub(u)?.scale(lambda_tilde))
}

/// The gradient flow of `J` split into two half-steps: first along
/// `w(x, y)` with `dt_1 = 1 / sum_j w_ij`, then along `w(y, x)` with
/// `dt_2 = 1 / sum_j w_ji`.
pub fn splitting_steps(u: &TokenMatrix, kernel: &KernelWeights) -> Result<TokenMatrix> {
    kernel.check_tokens(u, "splitting_steps")?;
    let w = kernel.weights();
    let row_sums = positive_row_sums(w, "splitting_steps")?;
    let wt = w.transpose();
    let col_sums = wt.row_sums();
    if let Some(col) = col_sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroColSum {
            op: "splitting_steps",
            col,
        });
    }
    let half = normalized_smoothing(w, &row_sums, u);
    Ok(normalized_smoothing(&wt, &col_sums, &half))
}
