//! A toy multi-layer attention stack with per-layer smoothing metrics.
//!
//! Each layer projects the current state to queries, keys and values,
//! applies one attention variant and feeds the result forward, optionally
//! with a residual connection. There are no feed-forward blocks, norms or
//! heads.

use crate::attention::{
    add_fidelity_term, check_lambda_tilde, project_qkv, softmax_attention_with_matrix, AttentionVariant,
    NeutrenoParams, ProjectionSet,
};
use crate::dynamics::{exceeds, measure, DynamicsTrace, DEFAULT_OVERFLOW_BOUND};
use crate::error::{Error, Result};
use crate::functional::KernelWeights;
use crate::linalg::{derive_seed, seeded_gaussian_matrix, TokenMatrix};

/// Stream index reserved for [`random_tokens`], far from the weight streams.
const INPUT_UNIT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub key_dim: usize,
    /// Must equal `input_dim`, since outputs feed the next layer directly.
    pub value_dim: usize,
    pub variant: AttentionVariant,
    pub lambda_tilde: f64,
    pub residual: bool,
    pub seed: u64,
    /// Weights are drawn with standard deviation `init_scale / sqrt(input_dim)`.
    pub init_scale: f64,
}

impl StackConfig {
    pub fn new(layers: usize, input_dim: usize, key_dim: usize, variant: AttentionVariant, seed: u64) -> Self {
        Self {
            layers,
            input_dim,
            key_dim,
            value_dim: input_dim,
            variant,
            lambda_tilde: 0.0,
            residual: false,
            seed,
            init_scale: 1.0,
        }
    }

    pub fn with_lambda_tilde(mut self, lambda_tilde: f64) -> Self {
        self.lambda_tilde = lambda_tilde;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidParameter("layers must be at least 1".into()));
        }
        if self.input_dim == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::InvalidParameter("dimensions must be positive".into()));
        }
        if self.value_dim != self.input_dim {
            return Err(Error::InvalidParameter(format!(
                "value_dim {} must equal input_dim {}",
                self.value_dim, self.input_dim
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        if self.variant == AttentionVariant::Neutreno {
            check_lambda_tilde(self.lambda_tilde)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackModel {
    config: StackConfig,
    layers: Vec<ProjectionSet>,
}

impl StackModel {
    /// Assembles a model from explicit weights, e.g. loaded from disk.
    pub fn from_layers(config: StackConfig, layers: Vec<ProjectionSet>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers {
            return Err(Error::InvalidParameter(format!(
                "expected {} layers, got {}",
                config.layers,
                layers.len()
            )));
        }
        for p in &layers {
            if p.input_dim() != config.input_dim || p.key_dim() != config.key_dim || p.value_dim() != config.value_dim {
                return Err(Error::Dimension {
                    op: "StackModel::from_layers",
                    left: (config.key_dim, config.input_dim),
                    right: p.w_k().shape(),
                });
            }
            if config.variant == AttentionVariant::Symmetric && !p.is_symmetric() {
                return Err(Error::InvalidParameter("symmetric variant needs W_Q = W_K".into()));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ProjectionSet] {
        &self.layers
    }
}

/// Draws the weights of every layer. Layer `l` (0-based) uses the substreams
/// `3l`, `3l + 1`, `3l + 2` of `config.seed` for `W_Q`, `W_K`, `W_V`, so all
/// variants share weights for the same seed; the symmetric variant reuses
/// `W_Q` as `W_K`.
pub fn init_stack(config: &StackConfig) -> Result<StackModel> {
    config.validate()?;
    let std = config.init_scale / (config.input_dim as f64).sqrt();
    let draw = |unit: u64, rows: usize| seeded_gaussian_matrix(rows, config.input_dim, derive_seed(config.seed, unit), std);
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers as u64 {
        let w_q = draw(3 * l, config.key_dim)?;
        let w_k = draw(3 * l + 1, config.key_dim)?;
        let w_v = draw(3 * l + 2, config.value_dim)?;
        let p = match config.variant {
            AttentionVariant::Symmetric => ProjectionSet::symmetric(w_q, w_v)?,
            _ => ProjectionSet::new(w_q, w_k, w_v)?,
        };
        layers.push(p);
    }
    StackModel::from_layers(config.clone(), layers)
}

/// Standard Gaussian `n x input_dim` tokens on a substream of `seed` that no
/// layer weight uses.
pub fn random_tokens(n: usize, input_dim: usize, seed: u64) -> Result<TokenMatrix> {
    seeded_gaussian_matrix(n, input_dim, derive_seed(seed, INPUT_UNIT), 1.0)
}

/// Runs the stack on `x0`.
///
/// The trace has one record per layer boundary: record 0 is the input and
/// record `l` the output of layer `l`. The J value of record `l >= 1` uses
/// layer `l`'s attention matrix as weights; record 0 uses layer 1's.
pub fn forward(model: &StackModel, x0: &TokenMatrix) -> Result<(TokenMatrix, DynamicsTrace)> {
    let cfg = &model.config;
    if x0.cols() != cfg.input_dim {
        return Err(Error::Dimension {
            op: "forward",
            left: (x0.rows(), cfg.input_dim),
            right: x0.shape(),
        });
    }
    let mut records = Vec::with_capacity(cfg.layers + 1);
    let mut state = x0.clone();
    let mut diverged = exceeds(x0, DEFAULT_OVERFLOW_BOUND);
    let mut v0: Option<NeutrenoParams> = None;
    for (l, p) in model.layers.iter().enumerate() {
        let (q, k, v) = project_qkv(&state, p)?;
        let (attended, a) = match cfg.variant {
            AttentionVariant::Symmetric => softmax_attention_with_matrix(&k, &k, &v)?,
            _ => softmax_attention_with_matrix(&q, &k, &v)?,
        };
        let kernel = KernelWeights::new(a)?;
        if l == 0 {
            records.push(measure(0, &state, &kernel, diverged, false));
        }
        let mut out = match cfg.variant {
            AttentionVariant::Neutreno => {
                let params = v0.get_or_insert_with(|| {
                    NeutrenoParams::new(cfg.lambda_tilde, v.clone()).expect("lambda_tilde validated at init")
                });
                add_fidelity_term(attended, &v, params)?
            }
            _ => attended,
        };
        if cfg.residual {
            out = out.add(&state)?;
        }
        diverged |= exceeds(&out, DEFAULT_OVERFLOW_BOUND);
        records.push(measure(l + 1, &out, &kernel, diverged, false));
        state = out;
    }
    let trace = DynamicsTrace::new(records, state.clone());
    Ok((state, trace))
}

/// Final-layer metrics of a softmax baseline and a NeuTRENO stack built from
/// the same seed and input.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline: DynamicsTrace,
    pub neutreno: DynamicsTrace,
}

impl SeedComparison {
    pub fn neutreno_below_baseline(&self) -> bool {
        self.neutreno.last().mean_cosine < self.baseline.last().mean_cosine
    }
}

/// Runs the baseline and the regularised stack for one seed on
/// [`random_tokens`] input. `template.variant` is ignored.
pub fn compare_seed(template: &StackConfig, n_tokens: usize, lambda_tilde: f64, seed: u64) -> Result<SeedComparison> {
    let x0 = random_tokens(n_tokens, template.input_dim, seed)?;
    let run = |variant, lambda| -> Result<DynamicsTrace> {
        let cfg = StackConfig {
            variant,
            lambda_tilde: lambda,
            seed,
            ..template.clone()
        };
        Ok(forward(&init_stack(&cfg)?, &x0)?.1)
    };
    Ok(SeedComparison {
        seed,
        baseline: run(AttentionVariant::Softmax, 0.0)?,
        neutreno: run(AttentionVariant::Neutreno, lambda_tilde)?,
    })
}

/// True when J never increases across layers `1..=L` by more than `slack`.
pub fn j_nonincreasing(trace: &DynamicsTrace, slack: f64) -> bool {
    trace.records()[1..]
        .windows(2)
        .all(|w| w[1].j_value <= w[0].j_value + slack)
}
