//! Dense row-major matrices, seeded random generation and the token-level
//! metrics used throughout the crate.
//!
//! Everything here is a pure function of its inputs. Matrices are plain
//! `Vec<f64>` buffers; sizes in this crate are small (tens of tokens), so no
//! blocking or SIMD is attempted.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Pivot magnitude below which [`solve_linear`] reports singularity.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Row-major `rows x cols` matrix of `f64`.
///
/// Zero-sized dimensions are representable so that shape errors can be
/// reported by the operations that reject them.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// An `N x D` grid of token representations, one token per row.
pub type TokenMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadBuffer {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (0, cols),
                    right: (i, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-column matrix holding `values`.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first row containing a NaN or infinity.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row(i).iter().any(|x| !x.is_finite()))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, i.e. the matrix of row-by-row inner products.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (s, &x) in sums.iter_mut().zip(r) {
                *s += x;
            }
        }
        sums
    }

    /// Mean over rows, as a vector of length `cols`.
    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

/// `out_i = u_i + sum_j p(i, j) (u_j - u_i)` for row-stochastic weights `p`.
///
/// Equal to `P u` up to rounding, but rows that are all equal are returned
/// unchanged bit for bit.
pub(crate) fn mix_rows(u: &Matrix, p: impl Fn(usize, usize) -> f64) -> Matrix {
    let mut out = u.clone();
    for i in 0..u.rows() {
        let ui = u.row(i);
        let mut delta = vec![0.0; u.cols()];
        for j in 0..u.rows() {
            let w = p(i, j);
            for ((d, &a), &b) in delta.iter_mut().zip(u.row(j)).zip(ui) {
                *d += w * (a - b);
            }
        }
        for (o, d) in out.row_mut(i).iter_mut().zip(delta) {
            *o += d;
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax applied independently to every row.
///
/// The row maximum is subtracted before exponentiation, so the result is
/// unchanged by adding a constant to a row. Rows whose scores spread over
/// more than ~745 can underflow to exact zeros.
pub fn row_softmax(scores: &Matrix) -> Result<Matrix> {
    if let Some(row) = scores.first_non_finite_row() {
        return Err(Error::NonFinite {
            op: "row_softmax",
            row,
        });
    }
    let mut out = scores.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// Average cosine similarity over all ordered pairs of distinct rows.
pub fn pairwise_cosine_mean(tokens: &TokenMatrix) -> Result<f64> {
    let n = tokens.rows();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "pairwise cosine needs at least two tokens, got {n}"
        )));
    }
    let norms2: Vec<f64> = tokens.row_iter().map(|r| dot(r, r)).collect();
    if let Some(row) = norms2.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroNorm {
            op: "pairwise_cosine_mean",
            row,
        });
    }
    if let Some(row) = norms2.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: "pairwise_cosine_mean",
            row,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dot(tokens.row(i), tokens.row(j)) / (norms2[i] * norms2[j]).sqrt();
            total += c.clamp(-1.0, 1.0);
        }
    }
    // each unordered pair stands for two ordered pairs
    Ok(total / ((n * (n - 1) / 2) as f64))
}

/// Largest Euclidean distance between any two rows; 0 iff all rows are equal.
pub fn max_pairwise_distance(tokens: &TokenMatrix) -> f64 {
    let mut best = 0.0f64;
    for i in 0..tokens.rows() {
        for j in (i + 1)..tokens.rows() {
            best = best.max(squared_distance(tokens.row(i), tokens.row(j)));
        }
    }
    best.sqrt()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for experimental unit `unit` under master seed `seed`.
///
/// The mix is `splitmix64(seed ^ splitmix64(unit))`; distinct units get
/// statistically independent ChaCha8 streams.
pub fn derive_seed(seed: u64, unit: u64) -> u64 {
    splitmix64(seed ^ splitmix64(unit))
}

/// ChaCha8 generator for `seed` positioned on its `stream`-th substream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `rows x cols` matrix of i.i.d. `N(0, scale^2)` entries drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn seeded_gaussian_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gaussian scale must be positive and finite, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    Matrix::new(rows, cols, data)
}

/// Solves `a * x = b` by LU factorisation with partial pivoting.
///
/// `b` may carry several right-hand sides as columns.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Dimension {
            op: "solve_linear",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, lu[(r, col)]))
            .max_by(|p, q| p.1.abs().total_cmp(&q.1.abs()))
            .expect("non-empty pivot range");
        if !(pivot.abs() >= PIVOT_TOLERANCE) {
            return Err(Error::Singular { col, pivot });
        }
        if pivot_row != col {
            for j in 0..n {
                lu.data.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..m {
                x.data.swap(col * m + j, pivot_row * m + j);
            }
        }
        for r in (col + 1)..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = lu[(col, j)];
                lu[(r, j)] -= factor * v;
            }
            for j in 0..m {
                let v = x[(col, j)];
                x[(r, j)] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        for j in 0..m {
            let mut acc = x[(col, j)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / lu[(col, col)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_single_element_is_one() {
        let m = Matrix::new(1, 1, vec![3.7]).unwrap();
        assert_eq!(row_softmax(&m).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let m = Matrix::new(1, 3, vec![0.0; 3]).unwrap();
        for &p in row_softmax(&m).unwrap().as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        // e^0 / (e^0 + e^{ln 4}) = 1/5
        let m = Matrix::new(1, 2, vec![0.0, 4f64.ln()]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!((s[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_reports_non_finite_row() {
        let m = Matrix::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, f64::NAN, 0.0]).unwrap();
        assert_eq!(
            row_softmax(&m),
            Err(Error::NonFinite {
                op: "row_softmax",
                row: 2
            })
        );
    }

    #[test]
    fn cosine_examples() {
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(pairwise_cosine_mean(&same).unwrap(), 1.0);

        let ortho = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(pairwise_cosine_mean(&ortho).unwrap(), 0.0);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let three = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [h, h]]).unwrap();
        // pair cosines 0, sqrt(2)/2, sqrt(2)/2
        let expected = (0.0 + 2.0 * h) / 3.0;
        assert!((pairwise_cosine_mean(&three).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.4714).abs() < 1e-4);
    }

    #[test]
    fn cosine_rejects_zero_row_and_single_token() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(
            pairwise_cosine_mean(&m),
            Err(Error::ZeroNorm {
                op: "pairwise_cosine_mean",
                row: 1
            })
        );
        let one = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(pairwise_cosine_mean(&one), Err(Error::Precondition(_))));
    }

    #[test]
    fn max_distance_examples() {
        assert_eq!(max_pairwise_distance(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()), 0.0);
        let pair = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(max_pairwise_distance(&pair), 5.0);
        let scalars = Matrix::column(&[0.0, 1.0, 5.0]);
        assert_eq!(max_pairwise_distance(&scalars), 5.0);
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        let a = seeded_gaussian_matrix(4, 5, 11, 1.0).unwrap();
        let b = seeded_gaussian_matrix(4, 5, 11, 1.0).unwrap();
        let c = seeded_gaussian_matrix(4, 5, 12, 1.0).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
        assert!(seeded_gaussian_matrix(2, 2, 0, 0.0).is_err());
        assert!(seeded_gaussian_matrix(2, 2, 0, -1.0).is_err());
    }

    #[test]
    fn gaussian_sample_mean_near_zero() {
        let m = seeded_gaussian_matrix(1000, 1000, 7, 1.0).unwrap();
        let mean = m.as_slice().iter().sum::<f64>() / 1e6;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = Matrix::from_rows(&[[1.5, -2.0], [3.0, 0.25]]).unwrap();
        assert_eq!(solve_linear(&Matrix::identity(2), &b).unwrap(), b);

        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]).unwrap();
        let x = solve_linear(&a, &Matrix::column(&[2.0, 8.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn solve_needs_pivoting() {
        // zero leading entry: fails without row exchange
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let x = solve_linear(&a, &Matrix::column(&[3.0, 5.0])).unwrap();
        assert_eq!(x.as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_linear(&a, &Matrix::column(&[1.0, 1.0])),
            Err(Error::Singular { .. })
        ));
        let b = Matrix::column(&[1.0, 1.0, 1.0]);
        assert!(matches!(
            solve_linear(&Matrix::identity(2), &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn solve_random_residual() {
        for seed in 0..20 {
            // diagonal shift keeps the system well conditioned
            let a = seeded_gaussian_matrix(5, 5, seed, 1.0)
                .unwrap()
                .add(&Matrix::identity(5).scale(5.0))
                .unwrap();
            let b = seeded_gaussian_matrix(5, 3, seed + 100, 1.0).unwrap();
            let x = solve_linear(&a, &b).unwrap();
            let residual = a.matmul(&x).unwrap().max_abs_diff(&b).unwrap();
            assert!(residual <= 1e-9 * (1.0 + b.max_abs()), "residual {residual}");
        }
    }

    fn matrix_strategy(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
            proptest::collection::vec(-range..range, r * c)
                .prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(m in matrix_strategy(8, 8, 50.0)) {
            let s = row_softmax(&m).unwrap();
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(m in matrix_strategy(6, 6, 20.0), shifts in proptest::collection::vec(-100.0..100.0f64, 6)) {
            let shifted = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] + shifts[i]);
            let d = row_softmax(&m).unwrap().max_abs_diff(&row_softmax(&shifted).unwrap()).unwrap();
            prop_assert!(d <= 1e-12, "diff {}", d);
        }

        #[test]
        fn cosine_scale_invariant(m in matrix_strategy(6, 4, 5.0), factors in proptest::collection::vec(0.01..100.0f64, 6)) {
            prop_assume!(m.rows() >= 2);
            prop_assume!(m.row_iter().all(|r| dot(r, r) > 1e-6));
            let scaled = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * factors[i]);
            let a = pairwise_cosine_mean(&m).unwrap();
            let b = pairwise_cosine_mean(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn distance_zero_iff_rows_equal(m in matrix_strategy(5, 3, 3.0)) {
            let equal = m.row_iter().all(|r| r == m.row(0));
            prop_assert_eq!(max_pairwise_distance(&m) == 0.0, equal);
            let repeated = Matrix::from_fn(m.rows(), m.cols(), |_, j| m[(0, j)]);
            prop_assert_eq!(max_pairwise_distance(&repeated), 0.0);
        }

        #[test]
        fn solve_residual_bound(seed in 0u64..10_000, n in 1usize..8) {
            let a = seeded_gaussian_matrix(n, n, seed, 1.0).unwrap()
                .add(&Matrix::identity(n).scale(n as f64 + 2.0)).unwrap();
            let b = seeded_gaussian_matrix(n, 2, seed ^ 0xABCD, 3.0).unwrap();
            let x = solve_linear(&a, &b).unwrap();
            let residual = a.matmul(&x).unwrap().max_abs_diff(&b).unwrap();
            prop_assert!(residual <= 1e-9 * (1.0 + b.max_abs()));
        }
    }
}
