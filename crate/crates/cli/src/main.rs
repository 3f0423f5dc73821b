use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neutreno_cli::commands::{random_tensor, run_dynamics, run_gradcheck, run_randomwalk, run_stack};
use neutreno_cli::config::ExperimentConfig;
use neutreno_cli::report::Summary;
use neutreno_cli::tensor_file::{load_tensor, matrix_from_csv, matrix_to_csv, save_tensor, Tensor};
use serde_json::json;

#[derive(Parser)]
#[command(name = "neutreno", version, about = "Attention smoothing experiments")]
struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for generated inputs.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Pass/fail tolerance of the command's primary check.
    #[arg(long, global = true)]
    tol: Option<String>,
    #[command(flatten)]
    params: Params,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

/// Config keys exposed as flags. Values go through the same parser as the
/// config file.
#[derive(Args, Default)]
struct Params {
    /// Number of tokens N.
    #[arg(long, global = true)]
    n: Option<String>,
    /// Token and value width D.
    #[arg(long, global = true)]
    d: Option<String>,
    /// Query/key width D_qk.
    #[arg(long = "d-qk", global = true)]
    d_qk: Option<String>,
    /// Stack depth L.
    #[arg(long, global = true)]
    layers: Option<String>,
    /// softmax, symmetric or neutreno.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Fidelity weight of the neutreno variant.
    #[arg(long = "lambda-tilde", global = true)]
    lambda_tilde: Option<String>,
    /// Comma-separated lambda_tilde sweep.
    #[arg(long, global = true)]
    lambdas: Option<String>,
    /// Frozen-transition iterations.
    #[arg(long, global = true)]
    steps: Option<String>,
    /// `A..B` (half-open) or a comma-separated list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Add a residual connection per layer (true/false).
    #[arg(long, global = true)]
    residual: Option<String>,
    /// Standard deviation of generated values and tokens; weights use it over sqrt(D).
    #[arg(long = "init-scale", global = true)]
    init_scale: Option<String>,
    /// Input generator: gaussian, or constant (all tokens equal).
    #[arg(long, global = true)]
    init: Option<String>,
    /// Standard deviation of generated keys and queries.
    #[arg(long = "score-scale", global = true)]
    score_scale: Option<String>,
    /// Max-abs value beyond which a trace is marked diverged.
    #[arg(long = "overflow-bound", global = true)]
    overflow_bound: Option<String>,
    /// Monte-Carlo walks.
    #[arg(long, global = true)]
    samples: Option<String>,
    /// Steps per walk k.
    #[arg(long = "walk-steps", global = true)]
    walk_steps: Option<String>,
    /// Starting token of the walks.
    #[arg(long, global = true)]
    start: Option<String>,
    /// Required fraction of seeds where neutreno ends below softmax.
    #[arg(long = "min-fraction", global = true)]
    min_fraction: Option<String>,
    /// Required fraction of seeds with J nonincreasing over depth.
    #[arg(long = "min-descent-fraction", global = true)]
    min_descent_fraction: Option<String>,
    /// Fidelity weight lambda of G in gradcheck.
    #[arg(long = "fidelity-lambda", global = true)]
    fidelity_lambda: Option<String>,
    /// Tensor file replacing the generated values.
    #[arg(long = "values-file", global = true)]
    values_file: Option<String>,
    /// Tensor file replacing the generated keys.
    #[arg(long = "keys-file", global = true)]
    keys_file: Option<String>,
    /// Tensor file replacing the generated queries.
    #[arg(long = "queries-file", global = true)]
    queries_file: Option<String>,
    /// Tensor file with a row-stochastic transition matrix.
    #[arg(long = "transition-file", global = true)]
    transition_file: Option<String>,
    /// Write each seed's stack weights as tensor files (true/false).
    #[arg(long = "save-weights", global = true)]
    save_weights: Option<String>,
}

impl Params {
    fn assignments(self) -> Vec<(&'static str, String)> {
        [
            ("n", self.n),
            ("d", self.d),
            ("d_qk", self.d_qk),
            ("layers", self.layers),
            ("variant", self.variant),
            ("lambda_tilde", self.lambda_tilde),
            ("lambdas", self.lambdas),
            ("steps", self.steps),
            ("seeds", self.seeds),
            ("residual", self.residual),
            ("init_scale", self.init_scale),
            ("init", self.init),
            ("score_scale", self.score_scale),
            ("overflow_bound", self.overflow_bound),
            ("samples", self.samples),
            ("walk_steps", self.walk_steps),
            ("start", self.start),
            ("min_fraction", self.min_fraction),
            ("min_descent_fraction", self.min_descent_fraction),
            ("fidelity_lambda", self.fidelity_lambda),
            ("values_file", self.values_file),
            ("keys_file", self.keys_file),
            ("queries_file", self.queries_file),
            ("transition_file", self.transition_file),
            ("save_weights", self.save_weights),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Frozen-transition dynamics; writes dynamics.csv.
    Dynamics,
    /// Layered attention stack over a seed ensemble.
    Stack,
    /// Stationary distribution and random-walk checks.
    Randomwalk,
    /// Finite-difference gradient checks and gradient alignment.
    Gradcheck,
    /// Tensor file utilities.
    Tensor {
        #[command(subcommand)]
        action: TensorAction,
    },
}

#[derive(Subcommand)]
enum TensorAction {
    /// Print rank, dims and value range.
    Inspect { path: PathBuf },
    /// Write a rank-1 or rank-2 tensor as headerless CSV.
    ToCsv { input: PathBuf, output: PathBuf },
    /// Read headerless numeric CSV into a rank-2 tensor.
    FromCsv { input: PathBuf, output: PathBuf },
    /// Seeded Gaussian matrix with standard deviation `init_scale`.
    Random { rows: usize, cols: usize, output: PathBuf },
}

fn build_config(cli: &mut Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    let mut assignments = std::mem::take(&mut cli.params).assignments();
    for (key, value) in [("seed", cli.seed.take()), ("out", cli.out.take()), ("tol", cli.tol.take())] {
        if let Some(v) = value {
            assignments.push((key, v));
        }
    }
    for (key, value) in &assignments {
        cfg.set(key, value)?;
    }
    for raw in &cli.set {
        let Some((key, value)) = raw.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{raw}`");
        };
        cfg.set(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tensor_action(action: TensorAction, cfg: &ExperimentConfig) -> Result<Summary> {
    let (outputs, metrics) = match action {
        TensorAction::Inspect { path } => {
            let t = load_tensor(&path).with_context(|| format!("reading {}", path.display()))?;
            let finite = t.data().iter().all(|x| x.is_finite());
            let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
            let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let metrics = json!({
                "rank": t.rank(),
                "dims": t.dims(),
                "len": t.data().len(),
                "finite": finite,
                "min": (!t.data().is_empty()).then_some(min),
                "max": (!t.data().is_empty()).then_some(max),
            });
            (vec![], metrics)
        }
        TensorAction::ToCsv { input, output } => {
            let m = load_tensor(&input)?.into_matrix()?;
            fs::write(&output, matrix_to_csv(&m)).with_context(|| format!("writing {}", output.display()))?;
            (vec![output], json!({"rows": m.rows(), "cols": m.cols()}))
        }
        TensorAction::FromCsv { input, output } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let m = matrix_from_csv(&text)?;
            save_tensor(&output, &Tensor::from(&m))?;
            (vec![output], json!({"rows": m.rows(), "cols": m.cols()}))
        }
        TensorAction::Random { rows, cols, output } => {
            let t = random_tensor(cfg, rows, cols)?;
            save_tensor(&output, &t)?;
            (vec![output], json!({"rows": rows, "cols": cols, "seed": cfg.seed}))
        }
    };
    Ok(Summary::new("tensor", vec![], outputs, metrics))
}

fn run() -> Result<bool> {
    let mut cli = Cli::parse();
    let cfg = build_config(&mut cli)?;
    let summary = match cli.command {
        Command::Dynamics => run_dynamics(&cfg)?,
        Command::Stack => run_stack(&cfg)?,
        Command::Randomwalk => run_randomwalk(&cfg)?,
        Command::Gradcheck => run_gradcheck(&cfg)?,
        Command::Tensor { action } => tensor_action(action, &cfg)?,
    };
    println!("{}", summary.to_json());
    if !summary.passed {
        eprintln!("failed checks: {}", summary.failures.join(", "));
    }
    Ok(summary.passed)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
