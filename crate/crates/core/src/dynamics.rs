//! Frozen-transition dynamics over depth.
//!
//! The plain recursion `u^(k) = A u^(k-1)` collapses every token onto the
//! limit vector. The regularised recursion
//! `u^(k) = A u^(k-1) + lambda_tilde (f - u^(k-1))` has the affine fixed
//! point `u* = lambda_tilde ((1 + lambda_tilde) I - A)^{-1} f`, which is not
//! a constant vector when `f` is not.
//!
//! The regularised iteration matrix `A - lambda_tilde I` is not guaranteed
//! to be a contraction, so runs record divergence instead of assuming
//! convergence.

use crate::attention::check_lambda_tilde;
use crate::error::{Error, Result};
use crate::functional::{functional_j, KernelWeights};
use crate::linalg::{max_pairwise_distance, pairwise_cosine_mean, solve_linear, Matrix, TokenMatrix};
use crate::random_walk::TransitionMatrix;

pub const DEFAULT_OVERFLOW_BOUND: f64 = 1e12;

/// `max_pairwise_distance` below which a state counts as a constant vector.
pub const DEFAULT_CONSTANT_TOLERANCE: f64 = 1e-10;

/// Number of squarings used by [`iteration_spectral_radius`].
const SPECTRAL_SQUARINGS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub state: Option<TokenMatrix>,
    pub j_value: f64,
    /// NaN when undefined (fewer than two tokens or a zero-norm token).
    pub mean_cosine: f64,
    pub max_pairwise: f64,
    /// Sticky: stays set once any entry has exceeded the overflow bound.
    pub diverged: bool,
}

/// Per-step metrics of a run, contiguous from step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrace {
    records: Vec<StepRecord>,
    final_state: TokenMatrix,
}

impl DynamicsTrace {
    pub(crate) fn new(records: Vec<StepRecord>, final_state: TokenMatrix) -> Self {
        debug_assert!(records.iter().enumerate().all(|(i, r)| r.step == i));
        Self { records, final_state }
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> &StepRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trace has at least one record")
    }

    pub fn final_state(&self) -> &TokenMatrix {
        &self.final_state
    }

    pub fn diverged(&self) -> bool {
        self.records.iter().any(|r| r.diverged)
    }

    /// True when `max_pairwise` never grows by more than `slack` between
    /// consecutive steps.
    pub fn max_pairwise_nonincreasing(&self, slack: f64) -> bool {
        self.records
            .windows(2)
            .all(|w| w[1].max_pairwise <= w[0].max_pairwise + slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub keep_states: bool,
    pub overflow_bound: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            keep_states: false,
            overflow_bound: DEFAULT_OVERFLOW_BOUND,
        }
    }
}

pub(crate) fn measure(
    step: usize,
    u: &TokenMatrix,
    kernel: &KernelWeights,
    diverged: bool,
    keep_state: bool,
) -> StepRecord {
    StepRecord {
        step,
        state: keep_state.then(|| u.clone()),
        j_value: functional_j(u, kernel).unwrap_or(f64::NAN),
        mean_cosine: pairwise_cosine_mean(u).unwrap_or(f64::NAN),
        max_pairwise: max_pairwise_distance(u),
        diverged,
    }
}

pub(crate) fn exceeds(u: &TokenMatrix, bound: f64) -> bool {
    u.as_slice().iter().any(|x| !(x.abs() <= bound))
}

fn run_frozen(
    v0: &TokenMatrix,
    a: &TransitionMatrix,
    steps: usize,
    opts: &TraceOptions,
    mut step_fn: impl FnMut(&TokenMatrix) -> Result<TokenMatrix>,
) -> Result<DynamicsTrace> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    if v0.rows() != a.len() {
        return Err(Error::Dimension {
            op: "dynamics",
            left: a.matrix().shape(),
            right: v0.shape(),
        });
    }
    let kernel = KernelWeights::new(a.matrix().clone())?;
    let mut diverged = exceeds(v0, opts.overflow_bound);
    let mut records = Vec::with_capacity(steps + 1);
    records.push(measure(0, v0, &kernel, diverged, opts.keep_states));
    let mut u = v0.clone();
    for step in 1..=steps {
        u = step_fn(&u)?;
        diverged |= exceeds(&u, opts.overflow_bound);
        records.push(measure(step, &u, &kernel, diverged, opts.keep_states));
    }
    Ok(DynamicsTrace::new(records, u))
}

/// `steps` applications of `u <- A u`, measured at every step.
pub fn run_plain_dynamics(v0: &TokenMatrix, a: &TransitionMatrix, steps: usize) -> Result<DynamicsTrace> {
    run_plain_dynamics_with(v0, a, steps, &TraceOptions::default())
}

pub fn run_plain_dynamics_with(
    v0: &TokenMatrix,
    a: &TransitionMatrix,
    steps: usize,
    opts: &TraceOptions,
) -> Result<DynamicsTrace> {
    run_frozen(v0, a, steps, opts, |u| a.apply(u))
}

/// `steps` applications of `u <- A u + lambda_tilde (f - u)`.
///
/// With `lambda_tilde = 0` the update is exactly `A u`, so the trace matches
/// [`run_plain_dynamics`] bit for bit.
pub fn run_neutreno_dynamics(
    v0: &TokenMatrix,
    f: &TokenMatrix,
    a: &TransitionMatrix,
    lambda_tilde: f64,
    steps: usize,
    overflow_bound: f64,
) -> Result<DynamicsTrace> {
    let opts = TraceOptions {
        keep_states: false,
        overflow_bound,
    };
    run_neutreno_dynamics_with(v0, f, a, lambda_tilde, steps, &opts)
}

pub fn run_neutreno_dynamics_with(
    v0: &TokenMatrix,
    f: &TokenMatrix,
    a: &TransitionMatrix,
    lambda_tilde: f64,
    steps: usize,
    opts: &TraceOptions,
) -> Result<DynamicsTrace> {
    check_lambda_tilde(lambda_tilde)?;
    if f.shape() != v0.shape() {
        return Err(Error::Dimension {
            op: "run_neutreno_dynamics (f vs v0)",
            left: f.shape(),
            right: v0.shape(),
        });
    }
    run_frozen(v0, a, steps, opts, |u| {
        let smoothed = a.apply(u)?;
        if lambda_tilde == 0.0 {
            return Ok(smoothed);
        }
        let mut next = smoothed;
        for i in 0..next.rows() {
            let (fr, ur) = (f.row(i), u.row(i));
            for (c, x) in next.row_mut(i).iter_mut().enumerate() {
                *x += lambda_tilde * (fr[c] - ur[c]);
            }
        }
        Ok(next)
    })
}

/// Upper estimate of the spectral radius of the iteration map `A - lambda_tilde I`.
///
/// Uses `|M^p|_inf^(1/p)` with `p = 2^12`, formed by repeated squaring with
/// rescaling. The estimate never falls below the true radius (Gelfand), so
/// `estimate < 1` certifies a contraction up to rounding.
pub fn iteration_spectral_radius(a: &TransitionMatrix, lambda_tilde: f64) -> f64 {
    let n = a.len();
    let mut m = a.matrix().clone();
    for i in 0..n {
        m[(i, i)] -= lambda_tilde;
    }
    let inf_norm = |x: &Matrix| {
        x.row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let norm = inf_norm(&m);
    if norm == 0.0 {
        return 0.0;
    }
    let mut log_scale = norm.ln();
    m = m.scale(1.0 / norm);
    for _ in 0..SPECTRAL_SQUARINGS {
        let sq = m.matmul(&m).expect("square matrix");
        let norm = inf_norm(&sq);
        if norm == 0.0 {
            return 0.0;
        }
        log_scale = 2.0 * log_scale + norm.ln();
        m = sq.scale(1.0 / norm);
    }
    (log_scale / 2f64.powi(SPECTRAL_SQUARINGS as i32)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub u_star: TokenMatrix,
    /// `|u* - (A u* + lambda_tilde (f - u*))|_max`.
    pub residual: f64,
    pub is_constant_vector: bool,
    /// Whether the iteration map `A - lambda_tilde I` is certified contracting.
    pub spectral_ok: bool,
    pub spectral_radius: f64,
}

/// Fixed point of the frozen regularised recursion, by a direct solve of
/// `((1 + lambda_tilde) I - A) u* = lambda_tilde f`.
pub fn neutreno_fixed_point(f: &TokenMatrix, a: &TransitionMatrix, lambda_tilde: f64) -> Result<FixedPointReport> {
    neutreno_fixed_point_with_tol(f, a, lambda_tilde, DEFAULT_CONSTANT_TOLERANCE)
}

pub fn neutreno_fixed_point_with_tol(
    f: &TokenMatrix,
    a: &TransitionMatrix,
    lambda_tilde: f64,
    constant_tol: f64,
) -> Result<FixedPointReport> {
    check_lambda_tilde(lambda_tilde)?;
    if lambda_tilde == 0.0 {
        return Err(Error::Precondition(
            "the regularised fixed point needs lambda_tilde > 0".into(),
        ));
    }
    if f.rows() != a.len() {
        return Err(Error::Dimension {
            op: "neutreno_fixed_point",
            left: a.matrix().shape(),
            right: f.shape(),
        });
    }
    let n = a.len();
    let shifted = Matrix::from_fn(n, n, |i, j| {
        let diag = if i == j { 1.0 + lambda_tilde } else { 0.0 };
        diag - a.matrix()[(i, j)]
    });
    let u_star = solve_linear(&shifted, &f.scale(lambda_tilde))?;
    let image = a.apply(&u_star)?.add(&f.sub(&u_star)?.scale(lambda_tilde))?;
    let residual = image.max_abs_diff(&u_star)?;
    let spectral_radius = iteration_spectral_radius(a, lambda_tilde);
    Ok(FixedPointReport {
        is_constant_vector: max_pairwise_distance(&u_star) < constant_tol,
        residual,
        spectral_ok: spectral_radius < 1.0,
        spectral_radius,
        u_star,
    })
}

/// Outcome of checking that the regularised fixed point keeps distinct
/// inputs apart.
#[derive(Debug, Clone, PartialEq)]
pub struct NonConstancyVerdict {
    /// Smallest `|u*_i - u*_j|` over pairs with `f_i != f_j`.
    pub min_margin: f64,
    pub pairs_checked: usize,
    /// The fixed point is not constant and every distinct pair stays apart.
    pub holds: bool,
    pub fixed_point: FixedPointReport,
}

/// Checks, on the frozen recursion, that the regularised dynamics does not
/// settle on a constant vector: solves for `u*` and measures how far apart
/// the rows of `u*` stay wherever the rows of `f` differ.
pub fn proposition1_check(f: &TokenMatrix, a: &TransitionMatrix, lambda_tilde: f64) -> Result<NonConstancyVerdict> {
    if max_pairwise_distance(f) == 0.0 {
        return Err(Error::Precondition(
            "f is a constant vector; distinct rows are required".into(),
        ));
    }
    let fixed_point = neutreno_fixed_point(f, a, lambda_tilde)?;
    let u = &fixed_point.u_star;
    let mut min_margin = f64::INFINITY;
    let mut pairs_checked = 0;
    for i in 0..f.rows() {
        for j in (i + 1)..f.rows() {
            if f.row(i) != f.row(j) {
                pairs_checked += 1;
                let d = crate::linalg::squared_distance(u.row(i), u.row(j)).sqrt();
                min_margin = min_margin.min(d);
            }
        }
    }
    Ok(NonConstancyVerdict {
        holds: !fixed_point.is_constant_vector && min_margin > 0.0,
        min_margin,
        pairs_checked,
        fixed_point,
    })
}

/// `(lambda_tilde, min_margin)` for each value in `lambdas`.
pub fn margin_sweep(f: &TokenMatrix, a: &TransitionMatrix, lambdas: &[f64]) -> Result<Vec<(f64, f64)>> {
    lambdas
        .iter()
        .map(|&l| proposition1_check(f, a, l).map(|v| (l, v.min_margin)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_gaussian_matrix;
    use crate::random_walk::{
        limit_vector, stationary_power_iteration, transition_from_scores,
    };

    fn random_chain(n: usize, seed: u64) -> TransitionMatrix {
        let q = seeded_gaussian_matrix(n, 3, seed, 1.0).unwrap();
        let k = seeded_gaussian_matrix(n, 3, seed + 1, 1.0).unwrap();
        transition_from_scores(&q, &k).unwrap()
    }

    fn half_chain() -> TransitionMatrix {
        TransitionMatrix::new(Matrix::filled(2, 2, 0.5)).unwrap()
    }

    #[test]
    fn constant_start_stays_flat() {
        let v0 = Matrix::from_fn(5, 3, |_, c| c as f64 + 1.0);
        let trace = run_plain_dynamics(&v0, &random_chain(5, 1), 10).unwrap();
        assert_eq!(trace.len(), 11);
        assert!(trace.records().iter().all(|r| r.max_pairwise == 0.0));
    }

    #[test]
    fn uniform_chain_reaches_mean_in_one_step() {
        let v0 = seeded_gaussian_matrix(4, 2, 3, 1.0).unwrap();
        let trace = run_plain_dynamics_with(
            &v0,
            &TransitionMatrix::uniform(4),
            5,
            &TraceOptions {
                keep_states: true,
                ..Default::default()
            },
        )
        .unwrap();
        let s1 = trace.records()[1].state.clone().unwrap();
        assert!(max_pairwise_distance(&s1) < 1e-15);
        for r in &trace.records()[2..] {
            assert!(r.state.as_ref().unwrap().max_abs_diff(&s1).unwrap() < 1e-15);
        }
    }

    #[test]
    fn plain_dynamics_collapse() {
        let a = random_chain(8, 10);
        let v0 = seeded_gaussian_matrix(8, 4, 12, 1.0).unwrap();
        let trace = run_plain_dynamics(&v0, &a, 200).unwrap();
        assert!(trace.max_pairwise_nonincreasing(1e-12));
        assert!(trace.last().max_pairwise <= 1e-8);
        assert!(trace.last().mean_cosine >= 1.0 - 1e-8);
        assert!(trace.last().max_pairwise <= trace.first().max_pairwise);

        let pi = stationary_power_iteration(&a, 1e-14, 100_000).unwrap();
        let lim = limit_vector(&pi, &v0).unwrap();
        for r in trace.final_state().row_iter() {
            for (x, l) in r.iter().zip(&lim) {
                assert!((x - l).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let v0 = Matrix::zeros(2, 1);
        assert!(run_plain_dynamics(&v0, &half_chain(), 0).is_err());
    }

    #[test]
    fn zero_lambda_reproduces_plain_trace() {
        let a = random_chain(6, 20);
        let v0 = seeded_gaussian_matrix(6, 3, 22, 1.0).unwrap();
        let f = seeded_gaussian_matrix(6, 3, 23, 1.0).unwrap();
        let plain = run_plain_dynamics(&v0, &a, 50).unwrap();
        let reg = run_neutreno_dynamics(&v0, &f, &a, 0.0, 50, DEFAULT_OVERFLOW_BOUND).unwrap();
        assert_eq!(plain, reg);
    }

    #[test]
    fn constant_signal_is_fixed() {
        let f = Matrix::from_fn(4, 2, |_, c| 3.0 - c as f64);
        let trace = run_neutreno_dynamics(&f, &f, &random_chain(4, 30), 0.6, 40, DEFAULT_OVERFLOW_BOUND).unwrap();
        for r in trace.records() {
            assert!(r.max_pairwise < 1e-14);
        }
        assert!(trace.final_state().max_abs_diff(&f).unwrap() < 1e-14);
    }

    #[test]
    fn regularised_dynamics_stays_spread() {
        let a = random_chain(8, 40);
        let f = seeded_gaussian_matrix(8, 3, 42, 1.0).unwrap();
        let trace = run_neutreno_dynamics(&f, &f, &a, 0.6, 200, DEFAULT_OVERFLOW_BOUND).unwrap();
        assert!(!trace.diverged());
        let fp = neutreno_fixed_point(&f, &a, 0.6).unwrap();
        assert!(fp.spectral_ok);
        assert!(trace.final_state().max_abs_diff(&fp.u_star).unwrap() <= 1e-8);
        assert!(trace.last().max_pairwise >= 0.1 * max_pairwise_distance(&f));
    }

    #[test]
    fn divergence_is_reported() {
        // eigenvalue -0.8 shifted by -lambda_tilde = -1.5 -> |.| > 1
        let a = TransitionMatrix::new(Matrix::from_rows(&[[0.1, 0.9], [0.9, 0.1]]).unwrap()).unwrap();
        let f = Matrix::column(&[0.0, 1.0]);
        let trace = run_neutreno_dynamics(&f, &f, &a, 1.5, 200, 1e6).unwrap();
        assert!(trace.diverged());
        let first = trace.records().iter().position(|r| r.diverged).unwrap();
        assert!(trace.records()[first..].iter().all(|r| r.diverged));
        let fp = neutreno_fixed_point(&f, &a, 1.5).unwrap();
        assert!(!fp.spectral_ok);
        assert!(fp.spectral_radius > 1.0);
    }

    #[test]
    fn spectral_radius_of_known_maps() {
        // uniform A: eigenvalues 1 and 0 -> A - l I has 1 - l and -l
        let a = TransitionMatrix::uniform(3);
        let r = iteration_spectral_radius(&a, 0.3);
        assert!((0.7 - 1e-12..0.7 * 1.001).contains(&r), "{r}");
        let r = iteration_spectral_radius(&a, 0.9);
        assert!((0.9 - 1e-12..0.9 * 1.001).contains(&r), "{r}");
    }

    #[test]
    fn constant_f_is_its_own_fixed_point() {
        let f = Matrix::filled(5, 2, 1.25);
        let fp = neutreno_fixed_point(&f, &random_chain(5, 50), 0.4).unwrap();
        assert!(fp.u_star.max_abs_diff(&f).unwrap() < 1e-14);
        assert!(fp.is_constant_vector);
    }

    #[test]
    fn hand_fixed_point() {
        // (1.5 I - A) u = 0.5 f  =>  u1 - u2/2 = 0,  -u1/2 + u2 = 1/2
        let f = Matrix::column(&[0.0, 1.0]);
        let fp = neutreno_fixed_point(&f, &half_chain(), 0.5).unwrap();
        assert!((fp.u_star[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((fp.u_star[(1, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!(fp.residual < 1e-15);
        assert!(!fp.is_constant_vector);

        // without the regulariser the same chain collapses to the mean
        let plain = run_plain_dynamics(&f, &half_chain(), 1).unwrap();
        assert_eq!(plain.final_state().as_slice(), &[0.5, 0.5]);

        let verdict = proposition1_check(&f, &half_chain(), 0.5).unwrap();
        assert!((verdict.min_margin - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(verdict.pairs_checked, 1);
        assert!(verdict.holds);
    }

    #[test]
    fn fixed_point_rejects_bad_lambda() {
        let f = Matrix::column(&[0.0, 1.0]);
        assert!(neutreno_fixed_point(&f, &half_chain(), 0.0).is_err());
        assert!(neutreno_fixed_point(&f, &half_chain(), -1.0).is_err());
        assert!(matches!(
            proposition1_check(&Matrix::filled(2, 1, 4.0), &half_chain(), 0.5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn margin_vanishes_as_lambda_shrinks() {
        let a = random_chain(6, 60);
        let f = seeded_gaussian_matrix(6, 2, 62, 1.0).unwrap();
        let sweep = margin_sweep(&f, &a, &[1.0, 0.6, 0.2, 0.05, 1e-3, 1e-8]).unwrap();
        for (l, m) in &sweep {
            println!("lambda_tilde {l:e}: margin {m:e}");
        }
        // u* tends to the constant limit vector as lambda_tilde -> 0
        assert!(sweep.last().unwrap().1 < 1e-6);
        assert!(sweep.iter().all(|&(_, m)| m > 0.0));
    }

    #[test]
    fn random_fixed_points_are_not_constant() {
        for seed in 0..20 {
            let a = random_chain(7, 100 + seed);
            let f = seeded_gaussian_matrix(7, 2, 200 + seed, 1.0).unwrap();
            for l in [0.2, 0.4, 0.6] {
                let v = proposition1_check(&f, &a, l).unwrap();
                assert!(v.fixed_point.residual <= 1e-9 * (1.0 + f.max_abs()));
                if v.fixed_point.spectral_ok {
                    assert!(v.holds);
                    assert!(v.min_margin > 1e-10);
                }
            }
        }
    }
}
