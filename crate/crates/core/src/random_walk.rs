//! Attention matrices read as Markov transition matrices over the value
//! vectors.
//!
//! Repeated smoothing `u^(k) = A u^(k-1)` is the expectation of a `k`-step
//! random walk started at each token, and since a softmax matrix is strictly
//! positive the walk has a unique stationary distribution `pi`. Every row of
//! `A^k V` therefore tends to the same vector `sum_j pi_j v_j`.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::attention_matrix;
use crate::error::{Error, Result};
use crate::linalg::{mix_rows, stream_rng, Matrix, TokenMatrix};

/// Allowed deviation of a transition-matrix row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Square, strictly positive, row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    a: Matrix,
}

impl TransitionMatrix {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::NotStochastic(format!("shape {:?} is not square", a.shape())));
        }
        for i in 0..a.rows() {
            let row = a.row(i);
            if let Some(j) = row.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(Error::NotStochastic(format!(
                    "entry ({i}, {j}) = {} is not strictly positive",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::NotStochastic(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { a })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            a: Matrix::filled(n, n, 1.0 / n as f64),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.rows() == 0
    }

    /// `A u`, evaluated in increment form so constant columns stay exact.
    pub fn apply(&self, u: &TokenMatrix) -> Result<TokenMatrix> {
        if u.rows() != self.len() {
            return Err(Error::Dimension {
                op: "TransitionMatrix::apply",
                left: self.a.shape(),
                right: u.shape(),
            });
        }
        Ok(mix_rows(u, |i, j| self.a[(i, j)]))
    }
}

/// `softmax(Q K^T / sqrt(D_qk))` as a transition matrix. Pass the keys twice
/// for the symmetric kernel.
pub fn transition_from_scores(q_or_k: &TokenMatrix, k: &TokenMatrix) -> Result<TransitionMatrix> {
    TransitionMatrix::new(attention_matrix(q_or_k, k)?)
}

/// `A^k V0`, by `k` successive applications.
pub fn iterate_state(v0: &TokenMatrix, a: &TransitionMatrix, k: usize) -> Result<TokenMatrix> {
    if v0.rows() != a.len() {
        return Err(Error::Dimension {
            op: "iterate_state",
            left: a.matrix().shape(),
            right: v0.shape(),
        });
    }
    let mut u = v0.clone();
    for _ in 0..k {
        u = a.apply(&u)?;
    }
    Ok(u)
}

/// Probability vector `pi` with strictly positive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pi: Vec<f64>,
}

impl StationaryDistribution {
    /// Normalises `weights` to sum to one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("empty distribution".into()));
        }
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "distribution weight {i} = {} is not strictly positive",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            pi: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// `|pi^T A - pi^T|_1`.
    pub fn residual(&self, a: &TransitionMatrix) -> f64 {
        left_multiply(&self.pi, a.matrix())
            .iter()
            .zip(&self.pi)
            .map(|(x, p)| (x - p).abs())
            .sum()
    }
}

fn left_multiply(p: &[f64], a: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &pi) in p.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(a.row(i)) {
            *o += pi * x;
        }
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Stationary distribution of the key-key chain `softmax(K K^T / sqrt(D_qk))`:
/// `pi_i = d_i / sum_j d_j` with `d_i = sum_j exp(k_i . k_j / sqrt(D_qk))`.
///
/// Only valid for the symmetric kernel. The degrees are formed in log space
/// so large scores do not overflow.
pub fn stationary_closed_form(k: &TokenMatrix) -> Result<StationaryDistribution> {
    let scores = crate::attention::attention_scores(k, k)?;
    if let Some(row) = scores.first_non_finite_row() {
        return Err(Error::NonFinite {
            op: "stationary_closed_form",
            row,
        });
    }
    let log_degrees: Vec<f64> = scores.row_iter().map(log_sum_exp).collect();
    let log_total = log_sum_exp(&log_degrees);
    StationaryDistribution::from_weights(log_degrees.iter().map(|d| (d - log_total).exp()).collect())
}

/// Power iteration `pi <- pi A` from the uniform distribution until
/// `|pi A - pi|_1 <= tol`.
pub fn stationary_power_iteration(a: &TransitionMatrix, tol: f64, max_iters: usize) -> Result<StationaryDistribution> {
    let n = a.len();
    stationary_power_iteration_from(a, &vec![1.0 / n as f64; n], tol, max_iters)
}

/// Power iteration from an arbitrary strictly positive starting distribution.
pub fn stationary_power_iteration_from(
    a: &TransitionMatrix,
    init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<StationaryDistribution> {
    if init.len() != a.len() {
        return Err(Error::Dimension {
            op: "stationary_power_iteration",
            left: a.matrix().shape(),
            right: (1, init.len()),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let mut pi = StationaryDistribution::from_weights(init.to_vec())?.pi;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = left_multiply(&pi, a.matrix());
        residual = next.iter().zip(&pi).map(|(x, p)| (x - p).abs()).sum();
        let total: f64 = next.iter().sum();
        pi = next.into_iter().map(|x| x / total).collect();
        // a row-stochastic A does not increase the l1 norm, so the
        // returned iterate has residual <= the one just measured
        if residual <= tol {
            return StationaryDistribution::from_weights(pi);
        }
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual,
    })
}

/// The over-smoothed limit `sum_j pi_j v0_j`.
pub fn limit_vector(pi: &StationaryDistribution, v0: &TokenMatrix) -> Result<Vec<f64>> {
    if pi.len() != v0.rows() {
        return Err(Error::Dimension {
            op: "limit_vector",
            left: (1, pi.len()),
            right: v0.shape(),
        });
    }
    Ok(left_multiply(pi.as_slice(), v0))
}

/// Monte-Carlo estimate of `E[B^(k)(start)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkEstimate {
    pub mean: Vec<f64>,
    /// Per-coordinate standard error of `mean` (sample std / sqrt(n)).
    pub std_error: Vec<f64>,
    pub samples: usize,
    /// How many walks ended on each token.
    pub end_counts: Vec<usize>,
}

/// Runs `n_samples` independent `k`-step walks from `start` over the rows of
/// `v0` with transition probabilities `A` and averages the end values.
///
/// Walk `w` draws from ChaCha8 stream `w` of `seed`, so the estimate does not
/// depend on how walks are scheduled across threads.
pub fn sample_random_walk(
    v0: &TokenMatrix,
    a: &TransitionMatrix,
    k: usize,
    start: usize,
    n_samples: usize,
    seed: u64,
) -> Result<WalkEstimate> {
    let n = a.len();
    if v0.rows() != n {
        return Err(Error::Dimension {
            op: "sample_random_walk",
            left: a.matrix().shape(),
            right: v0.shape(),
        });
    }
    if start >= n {
        return Err(Error::InvalidParameter(format!("start index {start} out of range for {n} tokens")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }

    let cumulative: Vec<Vec<f64>> = a
        .matrix()
        .row_iter()
        .map(|r| {
            r.iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let ends: Vec<usize> = (0..n_samples as u64)
        .into_par_iter()
        .map(|walk| {
            let mut rng = stream_rng(seed, walk);
            let mut node = start;
            for _ in 0..k {
                let u: f64 = rng.random::<f64>() * cumulative[node][n - 1];
                node = cumulative[node].iter().position(|&c| u < c).unwrap_or(n - 1);
            }
            node
        })
        .collect();

    let mut end_counts = vec![0usize; n];
    for e in ends {
        end_counts[e] += 1;
    }
    let total = n_samples as f64;
    let freqs: Vec<f64> = end_counts.iter().map(|&c| c as f64 / total).collect();
    let mean = left_multiply(&freqs, v0);
    let std_error = (0..v0.cols())
        .map(|c| {
            if n_samples < 2 {
                return 0.0;
            }
            let ss: f64 = freqs
                .iter()
                .enumerate()
                .map(|(j, f)| f * (v0[(j, c)] - mean[c]).powi(2))
                .sum();
            let var = ss * total / (total - 1.0);
            (var / total).sqrt()
        })
        .collect();
    Ok(WalkEstimate {
        mean,
        std_error,
        samples: n_samples,
        end_counts,
    })
}
