//! Subcommand implementations. Each writes its artifacts under `cfg.out`
//! and returns the summary printed to stdout.
//!
//! Generated inputs come from `derive_seed(seed, unit)` with the unit
//! constants below, so every input has its own reproducible stream.

use std::fs;
use std::path::{Path, PathBuf};

use neutreno_core::attention::symmetric_attention;
use neutreno_core::diagnostics::grad_alignment;
use neutreno_core::dynamics::{
    neutreno_fixed_point, run_neutreno_dynamics_with, run_plain_dynamics_with, DynamicsTrace, TraceOptions,
};
use neutreno_core::functional::{euler_step_j, fidelity_g, functional_j, grad_g, grad_j, KernelWeights};
use neutreno_core::gradcheck::{check_gradient, DEFAULT_STEPS};
use neutreno_core::linalg::{derive_seed, seeded_gaussian_matrix};
use neutreno_core::model_stack::{forward, init_stack, j_nonincreasing, random_tokens, StackConfig, StackModel};
use neutreno_core::random_walk::{
    iterate_state, limit_vector, sample_random_walk, stationary_closed_form, stationary_power_iteration,
    transition_from_scores,
};
use neutreno_core::{AttentionVariant, Matrix, TransitionMatrix};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, InitKind};
use crate::report::{dynamics_csv, stack_csv, write_file, write_json, Check, Summary};
use crate::tensor_file::{load_matrix, save_tensor, Tensor};
use crate::CliError;

pub const KEYS_UNIT: u64 = 0;
pub const QUERIES_UNIT: u64 = 1;
pub const VALUES_UNIT: u64 = 2;
pub const FIDELITY_UNIT: u64 = 3;
pub const TENSOR_UNIT: u64 = 4;
pub const WALK_UNIT: u64 = 5;

const POWER_TOL: f64 = 1e-14;
const POWER_MAX_ITERS: usize = 1_000_000;
const DEFAULT_MONOTONE_SLACK: f64 = 1e-12;
const DEFAULT_STATIONARY_TOL: f64 = 1e-10;
const STATIONARY_AGREEMENT: f64 = 1e-9;
const DEFAULT_GRAD_TOL: f64 = 1e-5;
const IDENTITY_TOL: f64 = 1e-12;
const WALK_Z_LIMIT: f64 = 4.0;

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
        path: cfg.out.display().to_string(),
        source,
    })?;
    Ok(cfg.out.clone())
}

fn expect_shape(what: &str, m: &Matrix, rows: usize, cols: Option<usize>) -> Result<(), CliError> {
    if m.rows() != rows || cols.is_some_and(|c| m.cols() != c) {
        return Err(CliError::Input(format!(
            "{what} has shape {:?}, expected {rows} rows{}",
            m.shape(),
            cols.map(|c| format!(" x {c} columns")).unwrap_or_default()
        )));
    }
    Ok(())
}

fn gaussian(cfg: &ExperimentConfig, rows: usize, cols: usize, unit: u64, scale: f64) -> Result<Matrix, CliError> {
    Ok(seeded_gaussian_matrix(rows, cols, derive_seed(cfg.seed, unit), scale)?)
}

/// Token values: `values_file`, or generated per `init`.
fn values(cfg: &ExperimentConfig) -> Result<Matrix, CliError> {
    if let Some(path) = &cfg.values_file {
        let v = load_matrix(path)?;
        expect_shape("values_file", &v, cfg.n, None)?;
        return Ok(v);
    }
    let rows = match cfg.init {
        InitKind::Gaussian => cfg.n,
        InitKind::Constant => 1,
    };
    let v = gaussian(cfg, rows, cfg.d, VALUES_UNIT, cfg.init_scale)?;
    Ok(Matrix::from_fn(cfg.n, cfg.d, |i, c| v[(i % rows, c)]))
}

/// `(queries, keys)`; the symmetric variant ties queries to keys.
fn queries_and_keys(cfg: &ExperimentConfig) -> Result<(Matrix, Matrix), CliError> {
    let k = match &cfg.keys_file {
        Some(path) => load_matrix(path)?,
        None => gaussian(cfg, cfg.n, cfg.d_qk, KEYS_UNIT, cfg.score_scale)?,
    };
    expect_shape("keys", &k, cfg.n, None)?;
    let q = match (&cfg.queries_file, cfg.variant) {
        (Some(path), _) => load_matrix(path)?,
        (None, AttentionVariant::Symmetric) => k.clone(),
        (None, _) => gaussian(cfg, cfg.n, k.cols(), QUERIES_UNIT, cfg.score_scale)?,
    };
    expect_shape("queries", &q, cfg.n, Some(k.cols()))?;
    Ok((q, k))
}

fn transition(cfg: &ExperimentConfig) -> Result<(TransitionMatrix, Option<Matrix>), CliError> {
    if let Some(path) = &cfg.transition_file {
        let a = load_matrix(path)?;
        expect_shape("transition_file", &a, cfg.n, Some(cfg.n))?;
        return Ok((TransitionMatrix::new(a)?, None));
    }
    let (q, k) = queries_and_keys(cfg)?;
    let a = transition_from_scores(&q, &k)?;
    let symmetric_keys = (q == k).then_some(k);
    Ok((a, symmetric_keys))
}

fn max_increase(trace: &DynamicsTrace) -> f64 {
    trace
        .records()
        .windows(2)
        .map(|w| w[1].max_pairwise - w[0].max_pairwise)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
}

fn limit_distance(a: &TransitionMatrix, v0: &Matrix, state: &Matrix) -> Option<f64> {
    let pi = stationary_power_iteration(a, POWER_TOL, POWER_MAX_ITERS).ok()?;
    let lim = limit_vector(&pi, v0).ok()?;
    let limit = Matrix::from_fn(state.rows(), state.cols(), |_, c| lim[c]);
    state.max_abs_diff(&limit).ok()
}

/// Frozen-transition dynamics; writes `dynamics.csv`.
///
/// The regularised recursion is used for the `neutreno` variant with the
/// initial values as the fidelity signal.
pub fn run_dynamics(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let out = prepare_out(cfg)?;
    let (a, _) = transition(cfg)?;
    let v0 = values(cfg)?;
    let opts = TraceOptions {
        keep_states: false,
        overflow_bound: cfg.overflow_bound,
    };
    let regularised = cfg.variant == AttentionVariant::Neutreno && cfg.lambda_tilde > 0.0;
    let trace = if cfg.variant == AttentionVariant::Neutreno {
        run_neutreno_dynamics_with(&v0, &v0, &a, cfg.lambda_tilde, cfg.steps, &opts)?
    } else {
        run_plain_dynamics_with(&v0, &a, cfg.steps, &opts)?
    };
    let csv = out.join("dynamics.csv");
    write_file(&csv, dynamics_csv(&trace))?;

    let mut checks = Vec::new();
    let mut metrics = json!({
        "variant": cfg.variant.name(),
        "lambda_tilde": cfg.lambda_tilde,
        "steps": cfg.steps,
        "initial_max_pairwise": trace.first().max_pairwise,
        "final_max_pairwise": trace.last().max_pairwise,
        "final_mean_cosine": trace.last().mean_cosine,
        "final_j_value": trace.last().j_value,
        "diverged": trace.diverged(),
    });
    if regularised {
        let fp = neutreno_fixed_point(&v0, &a, cfg.lambda_tilde)?;
        let bound = 1e-9 * (1.0 + v0.max_abs());
        checks.push(Check::at_most("fixed_point_residual", fp.residual, bound));
        checks.push(Check::at_most("diverged", f64::from(u8::from(trace.diverged())), 0.0));
        metrics["spectral_ok"] = json!(fp.spectral_ok);
        metrics["spectral_radius_estimate"] = json!(fp.spectral_radius);
        metrics["fixed_point_is_constant"] = json!(fp.is_constant_vector);
        metrics["distance_to_fixed_point"] = json!(trace.final_state().max_abs_diff(&fp.u_star)?);
    } else {
        let slack = cfg.tol.unwrap_or(DEFAULT_MONOTONE_SLACK);
        checks.push(Check::at_most("max_pairwise_increase", max_increase(&trace), slack));
        checks.push(Check::at_most(
            "final_minus_initial_max_pairwise",
            trace.last().max_pairwise - trace.first().max_pairwise,
            0.0,
        ));
        metrics["limit_distance"] = json!(limit_distance(&a, &v0, trace.final_state()));
    }
    Ok(Summary::new("dynamics", checks, vec![csv], metrics))
}

#[derive(Debug, Serialize)]
struct FinalMetrics {
    seed: u64,
    mean_cosine: f64,
    j_value: f64,
    max_pairwise: f64,
    smoothing_grew: bool,
    j_nonincreasing: bool,
}

impl FinalMetrics {
    fn new(seed: u64, trace: &DynamicsTrace) -> Self {
        let last = trace.last();
        Self {
            seed,
            mean_cosine: last.mean_cosine,
            j_value: last.j_value,
            max_pairwise: last.max_pairwise,
            smoothing_grew: last.mean_cosine >= trace.records()[1].mean_cosine,
            j_nonincreasing: j_nonincreasing(trace, 0.0),
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    lambda_tilde: f64,
    below_baseline: usize,
    seeds: usize,
    fraction_below_baseline: f64,
    per_seed: Vec<FinalMetrics>,
}

struct SeedRun {
    seed: u64,
    primary: (StackModel, DynamicsTrace),
    /// One trace per swept lambda_tilde, for the regularised variant.
    sweep: Vec<DynamicsTrace>,
}

fn stack_config(cfg: &ExperimentConfig, variant: AttentionVariant, lambda_tilde: f64, seed: u64) -> StackConfig {
    StackConfig {
        layers: cfg.layers,
        input_dim: cfg.d,
        key_dim: cfg.d_qk,
        value_dim: cfg.d,
        variant,
        lambda_tilde,
        residual: cfg.residual,
        seed,
        init_scale: cfg.init_scale,
    }
}

fn stack_input(cfg: &ExperimentConfig, seed: u64) -> Result<Matrix, CliError> {
    if let Some(path) = &cfg.values_file {
        let v = load_matrix(path)?;
        expect_shape("values_file", &v, cfg.n, Some(cfg.d))?;
        return Ok(v);
    }
    let x = random_tokens(cfg.n, cfg.d, seed)?;
    Ok(match cfg.init {
        InitKind::Gaussian => x,
        InitKind::Constant => Matrix::from_fn(cfg.n, cfg.d, |_, c| x[(0, c)]),
    })
}

fn lambda_tag(lambda_tilde: f64) -> String {
    format!("lt{lambda_tilde}")
}

fn save_weights(dir: &Path, seed: u64, model: &StackModel) -> Result<Vec<PathBuf>, CliError> {
    let layers = model.layers();
    let mut written = Vec::new();
    for (tag, pick) in [
        ("wq", (|p| p.w_q()) as fn(&neutreno_core::ProjectionSet) -> &Matrix),
        ("wk", |p| p.w_k()),
        ("wv", |p| p.w_v()),
    ] {
        let (rows, cols) = pick(&layers[0]).shape();
        let data = layers.iter().flat_map(|p| pick(p).as_slice().to_vec()).collect();
        let tensor = Tensor::new(vec![layers.len(), rows, cols], data)?;
        let path = dir.join(format!("stack_seed{seed}_{tag}.tensor"));
        save_tensor(&path, &tensor)?;
        written.push(path);
    }
    Ok(written)
}

/// Attention stack over a seed ensemble; writes one CSV per seed and run
/// plus `stack_summary.json`.
///
/// For the `neutreno` variant each seed also runs the softmax baseline with
/// the same weights and input, and every value in the sweep list is
/// compared against it.
pub fn run_stack(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let out = prepare_out(cfg)?;
    let seeds = cfg.seed_list();
    let lambdas = cfg.lambda_list();
    let compare = cfg.variant == AttentionVariant::Neutreno;
    let primary_variant = if compare { AttentionVariant::Softmax } else { cfg.variant };

    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRun, CliError> {
            let x0 = stack_input(cfg, seed)?;
            let model = init_stack(&stack_config(cfg, primary_variant, 0.0, seed))?;
            let (_, trace) = forward(&model, &x0)?;
            let sweep = if compare {
                lambdas
                    .iter()
                    .map(|&l| {
                        let m = init_stack(&stack_config(cfg, AttentionVariant::Neutreno, l, seed))?;
                        Ok(forward(&m, &x0)?.1)
                    })
                    .collect::<Result<_, CliError>>()?
            } else {
                Vec::new()
            };
            Ok(SeedRun {
                seed,
                primary: (model, trace),
                sweep,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut outputs = Vec::new();
    for run in &runs {
        let path = out.join(format!("stack_seed{}_{}.csv", run.seed, primary_variant.name()));
        write_file(&path, stack_csv(&run.primary.1))?;
        outputs.push(path);
        for (trace, &l) in run.sweep.iter().zip(&lambdas) {
            let path = out.join(format!("stack_seed{}_neutreno_{}.csv", run.seed, lambda_tag(l)));
            write_file(&path, stack_csv(trace))?;
            outputs.push(path);
        }
        if cfg.save_weights {
            outputs.extend(save_weights(&out, run.seed, &run.primary.0)?);
        }
    }

    let n_seeds = runs.len() as f64;
    let primary: Vec<FinalMetrics> = runs.iter().map(|r| FinalMetrics::new(r.seed, &r.primary.1)).collect();
    let descent_fraction = primary.iter().filter(|m| m.j_nonincreasing).count() as f64 / n_seeds;
    let smoothing_fraction = primary.iter().filter(|m| m.smoothing_grew).count() as f64 / n_seeds;
    let sweep: Vec<SweepPoint> = lambdas
        .iter()
        .enumerate()
        .filter(|_| compare)
        .map(|(idx, &l)| {
            let per_seed: Vec<FinalMetrics> = runs.iter().map(|r| FinalMetrics::new(r.seed, &r.sweep[idx])).collect();
            let below = runs
                .iter()
                .zip(&per_seed)
                .filter(|(r, m)| m.mean_cosine < r.primary.1.last().mean_cosine)
                .count();
            SweepPoint {
                lambda_tilde: l,
                below_baseline: below,
                seeds: runs.len(),
                fraction_below_baseline: below as f64 / n_seeds,
                per_seed,
            }
        })
        .collect();

    let mut checks = Vec::new();
    if let Some(min) = cfg.min_fraction {
        for point in &sweep {
            let name = format!("fraction_below_baseline_{}", lambda_tag(point.lambda_tilde));
            checks.push(Check::at_least(&name, point.fraction_below_baseline, min));
        }
    }
    if let Some(min) = cfg.min_descent_fraction {
        checks.push(Check::at_least("j_descent_fraction", descent_fraction, min));
    }

    let summary_doc = json!({
        "layers": cfg.layers,
        "n": cfg.n,
        "d": cfg.d,
        "d_qk": cfg.d_qk,
        "residual": cfg.residual,
        "seeds": seeds,
        "baseline_variant": primary_variant.name(),
        "baseline": primary,
        "j_descent_fraction": descent_fraction,
        "smoothing_fraction": smoothing_fraction,
        "sweep": sweep,
    });
    let summary_path = out.join("stack_summary.json");
    write_json(&summary_path, &summary_doc)?;
    outputs.push(summary_path);

    let metrics = json!({
        "j_descent_fraction": descent_fraction,
        "smoothing_fraction": smoothing_fraction,
        "fraction_below_baseline": sweep
            .iter()
            .map(|p| json!({"lambda_tilde": p.lambda_tilde, "fraction": p.fraction_below_baseline}))
            .collect::<Vec<_>>(),
    });
    Ok(Summary::new("stack", checks, outputs, metrics))
}

/// Stationary distribution and random-walk checks; writes `randomwalk.json`.
pub fn run_randomwalk(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let out = prepare_out(cfg)?;
    let (a, symmetric_keys) = transition(cfg)?;
    let v0 = values(cfg)?;
    if cfg.start >= cfg.n {
        return Err(CliError::Input(format!("start {} is not below n = {}", cfg.start, cfg.n)));
    }
    let tol = cfg.tol.unwrap_or(DEFAULT_STATIONARY_TOL);
    let mut checks = Vec::new();

    let power = stationary_power_iteration(&a, POWER_TOL, POWER_MAX_ITERS)?;
    let power_residual = power.residual(&a);
    checks.push(Check::at_most("power_residual", power_residual, tol));
    let closed = symmetric_keys.as_ref().map(stationary_closed_form).transpose()?;
    let closed_report = closed.as_ref().map(|c| {
        let residual = c.residual(&a);
        let gap = c
            .as_slice()
            .iter()
            .zip(power.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        checks.push(Check::at_most("closed_form_residual", residual, tol));
        checks.push(Check::at_most("closed_vs_power", gap, STATIONARY_AGREEMENT));
        json!({"pi": c.as_slice(), "residual": residual, "max_abs_diff_vs_power": gap})
    });

    let exact = iterate_state(&v0, &a, cfg.walk_steps)?;
    let exact_row = exact.row(cfg.start).to_vec();
    let walk = sample_random_walk(&v0, &a, cfg.walk_steps, cfg.start, cfg.samples, derive_seed(cfg.seed, WALK_UNIT))?;
    let z_scores: Vec<f64> = walk
        .mean
        .iter()
        .zip(&exact_row)
        .zip(&walk.std_error)
        .map(|((m, e), se)| {
            let dev = (m - e).abs();
            if *se > 0.0 {
                dev / se
            } else if dev <= 1e-12 * (1.0 + e.abs()) {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let max_z = z_scores.iter().copied().fold(0.0, f64::max);
    checks.push(Check::at_most("walk_max_standard_errors", max_z, WALK_Z_LIMIT));

    let final_state = iterate_state(&v0, &a, cfg.steps)?;
    let lim = limit_vector(&power, &v0)?;
    let limit = Matrix::from_fn(cfg.n, v0.cols(), |_, c| lim[c]);

    let doc = json!({
        "n": cfg.n,
        "symmetric_kernel": symmetric_keys.is_some(),
        "stationary": {
            "power": {"pi": power.as_slice(), "residual": power_residual},
            "closed_form": closed_report,
        },
        "walk": {
            "steps": cfg.walk_steps,
            "start": cfg.start,
            "samples": walk.samples,
            "mean": walk.mean,
            "exact": exact_row,
            "std_error": walk.std_error,
            "deviation_in_standard_errors": z_scores,
            "end_counts": walk.end_counts,
        },
        "limit": {
            "vector": lim,
            "steps": cfg.steps,
            "distance_at_final_step": final_state.max_abs_diff(&limit)?,
        },
    });
    let path = out.join("randomwalk.json");
    write_json(&path, &doc)?;
    Ok(Summary::new("randomwalk", checks, vec![path], doc))
}

/// Finite-difference gradient checks, the smoothing-step identity and the
/// gradient alignment metric; writes `gradcheck.json`.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let out = prepare_out(cfg)?;
    let tol = cfg.tol.unwrap_or(DEFAULT_GRAD_TOL);
    let (q, k) = queries_and_keys(cfg)?;
    let u = values(cfg)?;
    let f = gaussian(cfg, cfg.n, u.cols(), FIDELITY_UNIT, cfg.init_scale)?;
    let kernel = KernelWeights::exp_scores(&q, &k)?;
    let lambda = cfg.fidelity_lambda;

    let j_report = check_gradient(
        |x: &Matrix| functional_j(x, &kernel).expect("shape fixed"),
        &grad_j(&u, &kernel)?,
        &u,
        &DEFAULT_STEPS,
    )?;
    let g_report = check_gradient(
        |x: &Matrix| fidelity_g(x, &f, lambda).expect("shape fixed"),
        &grad_g(&u, &f, lambda)?,
        &u,
        &DEFAULT_STEPS,
    )?;
    let sym_kernel = KernelWeights::exp_scores(&k, &k)?;
    let identity = euler_step_j(&u, &sym_kernel)?.max_abs_diff(&symmetric_attention(&k, &u)?)?;
    let (alignment, skipped) = match grad_alignment(&u, &q, &k) {
        Ok(r) => (Some(r.mean_cosine_alignment), r.skipped_rows),
        Err(neutreno_core::Error::Degenerate { .. }) => (None, u.rows()),
        Err(e) => return Err(e.into()),
    };

    let checks = vec![
        Check::at_most("grad_j_max_relative_error", j_report.max_relative_error, tol),
        Check::at_most("grad_g_max_relative_error", g_report.max_relative_error, tol),
        Check::at_most("smoothing_step_identity_residual", identity, IDENTITY_TOL),
    ];
    let doc = json!({
        "n": cfg.n,
        "d": u.cols(),
        "d_qk": k.cols(),
        "tied_queries": q == k,
        "grad_j": {
            "max_relative_error": j_report.max_relative_error,
            "max_absolute_error": j_report.max_absolute_error,
            "step": j_report.step,
        },
        "grad_g": {
            "lambda": lambda,
            "max_relative_error": g_report.max_relative_error,
            "max_absolute_error": g_report.max_absolute_error,
            "step": g_report.step,
        },
        "smoothing_step_identity_residual": identity,
        "alignment": alignment,
        "alignment_skipped_rows": skipped,
    });
    let path = out.join("gradcheck.json");
    write_json(&path, &doc)?;
    Ok(Summary::new("gradcheck", checks, vec![path], doc))
}

/// Seeded Gaussian `rows x cols` tensor with standard deviation `init_scale`.
pub fn random_tensor(cfg: &ExperimentConfig, rows: usize, cols: usize) -> Result<Tensor, CliError> {
    cfg.validate()?;
    Ok(Tensor::from(&gaussian(cfg, rows, cols, TENSOR_UNIT, cfg.init_scale)?))
}
