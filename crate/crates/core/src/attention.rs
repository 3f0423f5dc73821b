//! Query/key/value projection and the three attention variants: standard
//! softmax attention, symmetric attention (queries tied to keys) and the
//! NeuTRENO update, which adds `lambda_tilde * (v0 - v)` to the softmax output.
//!
//! The row-stochastic attention matrix is available on its own through
//! [`attention_matrix`] so the random-walk code can reuse it verbatim.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{row_softmax, Matrix, TokenMatrix};

/// Attention rule applied by a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    Softmax,
    Symmetric,
    Neutreno,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Softmax => "softmax",
            AttentionVariant::Symmetric => "symmetric",
            AttentionVariant::Neutreno => "neutreno",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionVariant::Softmax),
            "symmetric" => Ok(AttentionVariant::Symmetric),
            "neutreno" => Ok(AttentionVariant::Neutreno),
            other => Err(Error::InvalidParameter(format!(
                "unknown attention variant {other:?} (expected softmax, symmetric or neutreno)"
            ))),
        }
    }
}

/// Projection matrices of one attention layer, each stored as
/// `out_dim x input_dim` so that `Q = X W_Q^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

impl ProjectionSet {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::Dimension {
                op: "ProjectionSet (W_Q vs W_K)",
                left: w_q.shape(),
                right: w_k.shape(),
            });
        }
        if w_v.cols() != w_q.cols() {
            return Err(Error::Dimension {
                op: "ProjectionSet (W_Q vs W_V)",
                left: w_q.shape(),
                right: w_v.shape(),
            });
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Tied projections, `W_Q = W_K = w_qk`.
    pub fn symmetric(w_qk: Matrix, w_v: Matrix) -> Result<Self> {
        Self::new(w_qk.clone(), w_qk, w_v)
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn is_symmetric(&self) -> bool {
        self.w_q == self.w_k
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.rows()
    }
}

/// Regulariser state for [`neutreno_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeutrenoParams {
    lambda_tilde: f64,
    first_layer_values: TokenMatrix,
}

impl NeutrenoParams {
    pub fn new(lambda_tilde: f64, first_layer_values: TokenMatrix) -> Result<Self> {
        check_lambda_tilde(lambda_tilde)?;
        Ok(Self {
            lambda_tilde,
            first_layer_values,
        })
    }

    pub fn lambda_tilde(&self) -> f64 {
        self.lambda_tilde
    }

    pub fn first_layer_values(&self) -> &TokenMatrix {
        &self.first_layer_values
    }
}

pub(crate) fn check_lambda_tilde(lambda_tilde: f64) -> Result<()> {
    if lambda_tilde >= 0.0 && lambda_tilde.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "lambda_tilde must be finite and nonnegative, got {lambda_tilde}"
        )))
    }
}

/// `(X W_Q^T, X W_K^T, X W_V^T)`.
pub fn project_qkv(x: &TokenMatrix, p: &ProjectionSet) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    if x.cols() != p.input_dim() {
        return Err(Error::Dimension {
            op: "project_qkv",
            left: x.shape(),
            right: p.w_q.shape(),
        });
    }
    let q = x.matmul_transposed(&p.w_q)?;
    let k = x.matmul_transposed(&p.w_k)?;
    let v = x.matmul_transposed(&p.w_v)?;
    Ok((q, k, v))
}

/// Scaled scores `q_i . k_j / sqrt(D_qk)`.
pub fn attention_scores(q: &TokenMatrix, k: &TokenMatrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attention_scores",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.cols() == 0 {
        return Err(Error::InvalidParameter("key dimension D_qk must be positive".into()));
    }
    let scale = (k.cols() as f64).sqrt();
    Ok(q.matmul_transposed(k)?.map(|s| s / scale))
}

/// Row-stochastic attention matrix `softmax(Q K^T / sqrt(D_qk))`.
pub fn attention_matrix(q: &TokenMatrix, k: &TokenMatrix) -> Result<Matrix> {
    row_softmax(&attention_scores(q, k)?)
}

fn check_values(k: &TokenMatrix, v: &TokenMatrix) -> Result<()> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "attention (keys vs values)",
            left: k.shape(),
            right: v.shape(),
        });
    }
    Ok(())
}

/// Softmax attention returning both the output and the attention matrix.
pub fn softmax_attention_with_matrix(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
) -> Result<(TokenMatrix, Matrix)> {
    check_values(k, v)?;
    let a = attention_matrix(q, k)?;
    let out = a.matmul(v)?;
    Ok((out, a))
}

/// `softmax(Q K^T / sqrt(D_qk)) V`.
pub fn softmax_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    softmax_attention_with_matrix(q, k, v).map(|(out, _)| out)
}

/// Attention with queries tied to keys: `softmax(K K^T / sqrt(D_qk)) V`.
pub fn symmetric_attention(k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    softmax_attention(k, k, v)
}

/// Adds `lambda_tilde * (v0 - v)` to a precomputed attention output.
///
/// A zero `lambda_tilde` returns `attended` untouched so the regularised
/// path is bitwise identical to plain attention.
pub fn add_fidelity_term(attended: TokenMatrix, v: &TokenMatrix, params: &NeutrenoParams) -> Result<TokenMatrix> {
    let v0 = params.first_layer_values();
    if v0.shape() != v.shape() {
        return Err(Error::Dimension {
            op: "neutreno (v0 vs values)",
            left: v0.shape(),
            right: v.shape(),
        });
    }
    let lambda = params.lambda_tilde();
    if lambda == 0.0 {
        return Ok(attended);
    }
    let mut out = attended;
    for i in 0..out.rows() {
        let (r0, rv) = (v0.row(i), v.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o += lambda * (r0[j] - rv[j]);
        }
    }
    Ok(out)
}

/// NeuTRENO attention: `softmax(Q K^T / sqrt(D_qk)) V + lambda_tilde (V0 - V)`.
pub fn neutreno_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    params: &NeutrenoParams,
) -> Result<TokenMatrix> {
    if params.first_layer_values().shape() != v.shape() {
        return Err(Error::Dimension {
            op: "neutreno (v0 vs values)",
            left: params.first_layer_values().shape(),
            right: v.shape(),
        });
    }
    let attended = softmax_attention(q, k, v)?;
    add_fidelity_term(attended, v, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_gaussian_matrix;
    use proptest::prelude::*;

    fn loop_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        // unnormalised exp weights with an explicit double loop
        let d = k.cols() as f64;
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let mut weights = Vec::new();
            for j in 0..k.rows() {
                let s: f64 = (0..k.cols()).map(|c| q[(i, c)] * k[(j, c)]).sum();
                weights.push((s / d.sqrt()).exp());
            }
            let z: f64 = weights.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out[(i, c)] += weights[j] / z * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn projection_of_identity() {
        let eye = Matrix::identity(3);
        let p = ProjectionSet::new(eye.clone(), eye.clone(), eye.clone()).unwrap();
        let (q, k, v) = project_qkv(&eye, &p).unwrap();
        assert_eq!(q, eye);
        assert_eq!(k, eye);
        assert_eq!(v, eye);
    }

    #[test]
    fn projection_by_hand() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let w_q = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
        let w_k = Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.0]]).unwrap();
        let w_v = Matrix::from_rows(&[[1.0, -1.0], [0.5, 0.5], [0.0, 3.0]]).unwrap();
        let (q, k, v) = project_qkv(&x, &ProjectionSet::new(w_q, w_k, w_v).unwrap()).unwrap();
        // rows of X dotted with rows of W
        assert_eq!(q, Matrix::from_rows(&[[1.0, 3.0], [3.0, 7.0]]).unwrap());
        assert_eq!(k, Matrix::from_rows(&[[2.0, 2.0], [4.0, 6.0]]).unwrap());
        assert_eq!(v, Matrix::from_rows(&[[-1.0, 1.5, 6.0], [-1.0, 3.5, 12.0]]).unwrap());
    }

    #[test]
    fn projection_of_zero_input() {
        let p = ProjectionSet::new(
            seeded_gaussian_matrix(2, 3, 1, 1.0).unwrap(),
            seeded_gaussian_matrix(2, 3, 2, 1.0).unwrap(),
            seeded_gaussian_matrix(4, 3, 3, 1.0).unwrap(),
        )
        .unwrap();
        let (q, k, v) = project_qkv(&Matrix::zeros(5, 3), &p).unwrap();
        assert_eq!(q.max_abs() + k.max_abs() + v.max_abs(), 0.0);
    }

    #[test]
    fn projection_shape_errors() {
        let eye = Matrix::identity(2);
        assert!(ProjectionSet::new(eye.clone(), Matrix::identity(3), eye.clone()).is_err());
        let p = ProjectionSet::new(eye.clone(), eye.clone(), eye).unwrap();
        let err = project_qkv(&Matrix::zeros(4, 3), &p).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "project_qkv",
                left: (4, 3),
                right: (2, 2)
            }
        );
    }

    #[test]
    fn single_token_returns_values() {
        let q = Matrix::from_rows(&[[0.3, -2.0]]).unwrap();
        let k = Matrix::from_rows(&[[1.0, 5.0]]).unwrap();
        let v = Matrix::from_rows(&[[7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(softmax_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn hand_softmax_attention() {
        let q = Matrix::column(&[1.0, 0.0]);
        let k = Matrix::column(&[0.0, 4f64.ln()]);
        let v = Matrix::identity(2);
        let out = softmax_attention(&q, &k, &v).unwrap();
        let expected = Matrix::from_rows(&[[0.2, 0.8], [0.5, 0.5]]).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn equal_keys_give_column_mean() {
        let q = seeded_gaussian_matrix(4, 3, 5, 1.0).unwrap();
        let k = Matrix::filled(4, 3, 0.7);
        let v = seeded_gaussian_matrix(4, 2, 6, 1.0).unwrap();
        let out = softmax_attention(&q, &k, &v).unwrap();
        let mean = v.col_means();
        for r in out.row_iter() {
            for (a, b) in r.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_key_dimension_is_rejected() {
        let empty = Matrix::zeros(3, 0);
        let v = Matrix::zeros(3, 2);
        assert!(matches!(
            softmax_attention(&empty, &empty, &v),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn symmetric_matches_tied_softmax() {
        let k = seeded_gaussian_matrix(6, 3, 9, 1.0).unwrap();
        let v = seeded_gaussian_matrix(6, 4, 10, 1.0).unwrap();
        assert_eq!(symmetric_attention(&k, &v).unwrap(), softmax_attention(&k, &k, &v).unwrap());
    }

    #[test]
    fn symmetric_zero_keys_average() {
        let k = Matrix::zeros(2, 1);
        let v = Matrix::from_rows(&[[1.0, 3.0], [5.0, -1.0]]).unwrap();
        let out = symmetric_attention(&k, &v).unwrap();
        for r in out.row_iter() {
            assert_eq!(r, &[3.0, 1.0]);
        }
    }

    #[test]
    fn symmetric_matches_loop_oracle() {
        let k = seeded_gaussian_matrix(4, 3, 21, 1.0).unwrap();
        let v = seeded_gaussian_matrix(4, 3, 22, 1.0).unwrap();
        let out = symmetric_attention(&k, &v).unwrap();
        assert!(out.max_abs_diff(&loop_oracle(&k, &k, &v)).unwrap() <= 1e-14);
    }

    #[test]
    fn neutreno_degenerate_cases() {
        let q = seeded_gaussian_matrix(5, 3, 1, 1.0).unwrap();
        let k = seeded_gaussian_matrix(5, 3, 2, 1.0).unwrap();
        let v = seeded_gaussian_matrix(5, 4, 3, 1.0).unwrap();
        let v0 = seeded_gaussian_matrix(5, 4, 4, 1.0).unwrap();
        let plain = softmax_attention(&q, &k, &v).unwrap();

        let off = NeutrenoParams::new(0.0, v0).unwrap();
        assert_eq!(neutreno_attention(&q, &k, &v, &off).unwrap(), plain);

        let same = NeutrenoParams::new(0.6, v.clone()).unwrap();
        assert_eq!(neutreno_attention(&q, &k, &v, &same).unwrap(), plain);
    }

    #[test]
    fn neutreno_two_term_assembly() {
        let q = seeded_gaussian_matrix(4, 2, 31, 1.0).unwrap();
        let k = seeded_gaussian_matrix(4, 2, 32, 1.0).unwrap();
        let v = seeded_gaussian_matrix(4, 3, 33, 1.0).unwrap();
        let v0 = seeded_gaussian_matrix(4, 3, 34, 1.0).unwrap();
        let params = NeutrenoParams::new(0.6, v0.clone()).unwrap();
        let out = neutreno_attention(&q, &k, &v, &params).unwrap();
        let expected = loop_oracle(&q, &k, &v)
            .add(&v0.sub(&v).unwrap().scale(0.6))
            .unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() <= 1e-14);
    }

    #[test]
    fn neutreno_rejects_bad_inputs() {
        assert!(NeutrenoParams::new(-0.1, Matrix::zeros(2, 2)).is_err());
        assert!(NeutrenoParams::new(f64::NAN, Matrix::zeros(2, 2)).is_err());
        let params = NeutrenoParams::new(0.5, Matrix::zeros(3, 2)).unwrap();
        let k = Matrix::zeros(2, 2);
        assert!(matches!(
            neutreno_attention(&k, &k, &Matrix::zeros(2, 2), &params),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn variant_parsing() {
        for v in [AttentionVariant::Softmax, AttentionVariant::Symmetric, AttentionVariant::Neutreno] {
            assert_eq!(v.name().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("linear".parse::<AttentionVariant>().is_err());
    }

    fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn output_rows_in_value_hull(seed in 0u64..5_000, n in 1usize..10) {
            let q = seeded_gaussian_matrix(n, 3, seed, 2.0).unwrap();
            let k = seeded_gaussian_matrix(n, 3, seed + 1, 2.0).unwrap();
            let v = seeded_gaussian_matrix(n, 4, seed + 2, 1.0).unwrap();
            let (out, a) = softmax_attention_with_matrix(&q, &k, &v).unwrap();
            for c in 0..4 {
                let lo = (0..n).map(|i| v[(i, c)]).fold(f64::INFINITY, f64::min);
                let hi = (0..n).map(|i| v[(i, c)]).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..n {
                    prop_assert!(out[(i, c)] >= lo - 1e-12 && out[(i, c)] <= hi + 1e-12);
                }
            }
            for r in a.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..5_000, perm in perm_strategy(7), lambda in 0.0..1.5f64) {
            let q = seeded_gaussian_matrix(7, 3, seed, 1.0).unwrap();
            let k = seeded_gaussian_matrix(7, 3, seed + 1, 1.0).unwrap();
            let v = seeded_gaussian_matrix(7, 2, seed + 2, 1.0).unwrap();
            let v0 = seeded_gaussian_matrix(7, 2, seed + 3, 1.0).unwrap();
            let (qp, kp, vp, v0p) = (q.permute_rows(&perm), k.permute_rows(&perm), v.permute_rows(&perm), v0.permute_rows(&perm));

            let d = softmax_attention(&qp, &kp, &vp).unwrap()
                .max_abs_diff(&softmax_attention(&q, &k, &v).unwrap().permute_rows(&perm)).unwrap();
            prop_assert!(d <= 1e-12);

            let d = symmetric_attention(&kp, &vp).unwrap()
                .max_abs_diff(&symmetric_attention(&k, &v).unwrap().permute_rows(&perm)).unwrap();
            prop_assert!(d <= 1e-12);

            let p = NeutrenoParams::new(lambda, v0).unwrap();
            let pp = NeutrenoParams::new(lambda, v0p).unwrap();
            let d = neutreno_attention(&qp, &kp, &vp, &pp).unwrap()
                .max_abs_diff(&neutreno_attention(&q, &k, &v, &p).unwrap().permute_rows(&perm)).unwrap();
            prop_assert!(d <= 1e-12);
        }
    }
}
