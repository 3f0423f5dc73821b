//! Kernel-based gradient estimates and their alignment.
//!
//! Both estimates have the form `g_i = sum_j (v_i - v_j) exp(s_ij)`, with
//! scores `s_ij = k_i . k_j / sqrt(D_qk)` for the symmetric estimate and
//! `q_i . k_j / sqrt(D_qk)` for the asymmetric one. Alignment is the mean
//! per-row cosine between the two.

use crate::attention::attention_scores;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, TokenMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GradApproxReport {
    pub sym_grad: TokenMatrix,
    pub asym_grad: TokenMatrix,
    /// Mean cosine over the rows that were not skipped, in `[-1, 1]`.
    pub mean_cosine_alignment: f64,
    /// Rows where either estimate is exactly zero.
    pub skipped_rows: usize,
}

fn kernel_gradient(v: &TokenMatrix, scores: &Matrix) -> Result<TokenMatrix> {
    if scores.rows() != v.rows() || scores.cols() != v.rows() {
        return Err(Error::Dimension {
            op: "gradient approximation (scores vs values)",
            left: scores.shape(),
            right: v.shape(),
        });
    }
    let (n, d) = v.shape();
    let mut g = Matrix::zeros(n, d);
    for i in 0..n {
        let vi = v.row(i);
        let gi = g.row_mut(i);
        for j in 0..n {
            let w = scores[(i, j)].exp();
            for ((g, a), b) in gi.iter_mut().zip(vi).zip(v.row(j)) {
                *g += (a - b) * w;
            }
        }
    }
    Ok(g)
}

/// `sum_j (v_i - v_j) exp(k_i . k_j / sqrt(D_qk))` for every row `i`.
pub fn symmetric_grad_approx(v: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    kernel_gradient(v, &attention_scores(k, k)?)
}

/// `sum_j (v_i - v_j) exp(q_i . k_j / sqrt(D_qk))` for every row `i`.
pub fn asymmetric_grad_approx(v: &TokenMatrix, q: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    if q.rows() != k.rows() {
        return Err(Error::Dimension {
            op: "asymmetric_grad_approx (queries vs keys)",
            left: q.shape(),
            right: k.shape(),
        });
    }
    kernel_gradient(v, &attention_scores(q, k)?)
}

/// Computes both estimates and the mean per-row cosine between them.
///
/// Rows where either estimate is the zero vector have no defined cosine
/// and are skipped; if every row is skipped the result is
/// [`Error::Degenerate`].
pub fn grad_alignment(v: &TokenMatrix, q: &TokenMatrix, k: &TokenMatrix) -> Result<GradApproxReport> {
    let sym_grad = symmetric_grad_approx(v, k)?;
    let asym_grad = asymmetric_grad_approx(v, q, k)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (a, b) in sym_grad.row_iter().zip(asym_grad.row_iter()) {
        let (na, nb) = (dot(a, a), dot(b, b));
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        total += (dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate { op: "grad_alignment" });
    }
    Ok(GradApproxReport {
        skipped_rows: v.rows() - used,
        mean_cosine_alignment: total / used as f64,
        sym_grad,
        asym_grad,
    })
}
