//! Experiment configuration.
//!
//! Config files are flat `key = value` lines; `#` starts a comment. Every
//! key can also be set from the command line, and later assignments win, so
//! flags applied after the file override it. Unknown keys are errors.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use neutreno_core::AttentionVariant;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", line_suffix(*.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" on line {l}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Gaussian,
    /// Every token equal to one Gaussian draw.
    Constant,
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "constant" => Ok(Self::Constant),
            _ => Err("expected `gaussian` or `constant`".into()),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Constant => "constant",
        })
    }
}

fn serialize_variant<S: serde::Serializer>(v: &AttentionVariant, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(v.name())
}

/// Every recognised key, in the order they are documented.
pub const KEYS: &[&str] = &[
    "n",
    "d",
    "d_qk",
    "layers",
    "variant",
    "lambda_tilde",
    "lambdas",
    "steps",
    "seed",
    "seeds",
    "tol",
    "residual",
    "init_scale",
    "init",
    "score_scale",
    "overflow_bound",
    "samples",
    "walk_steps",
    "start",
    "min_fraction",
    "min_descent_fraction",
    "fidelity_lambda",
    "values_file",
    "keys_file",
    "queries_file",
    "transition_file",
    "save_weights",
    "out",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Number of tokens.
    pub n: usize,
    /// Token and value width; also the stack's input width.
    pub d: usize,
    pub d_qk: usize,
    pub layers: usize,
    #[serde(serialize_with = "serialize_variant")]
    pub variant: AttentionVariant,
    pub lambda_tilde: f64,
    /// Sweep values; empty means just `lambda_tilde`.
    pub lambdas: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    /// Seed ensemble; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub tol: Option<f64>,
    pub residual: bool,
    pub init_scale: f64,
    pub init: InitKind,
    /// Standard deviation of generated queries and keys.
    pub score_scale: f64,
    pub overflow_bound: f64,
    pub samples: usize,
    pub walk_steps: usize,
    pub start: usize,
    pub min_fraction: Option<f64>,
    pub min_descent_fraction: Option<f64>,
    pub fidelity_lambda: f64,
    pub values_file: Option<PathBuf>,
    pub keys_file: Option<PathBuf>,
    pub queries_file: Option<PathBuf>,
    pub transition_file: Option<PathBuf>,
    pub save_weights: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 16,
            d: 8,
            d_qk: 8,
            layers: 12,
            variant: AttentionVariant::Softmax,
            lambda_tilde: 0.6,
            lambdas: Vec::new(),
            steps: 200,
            seed: 0,
            seeds: Vec::new(),
            tol: None,
            residual: false,
            init_scale: 1.0,
            init: InitKind::Gaussian,
            score_scale: 1.0,
            overflow_bound: 1e12,
            samples: 200_000,
            walk_steps: 5,
            start: 0,
            min_fraction: None,
            min_descent_fraction: None,
            fidelity_lambda: 1.0,
            values_file: None,
            keys_file: None,
            queries_file: None,
            transition_file: None,
            save_weights: false,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

/// `"0..50"` (half-open), `"1,2,3"` or a single seed.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        key: "seeds".into(),
        value: value.into(),
        reason: reason.into(),
    };
    let seeds: Vec<u64> = if let Some((a, b)) = value.split_once("..") {
        let range: Range<u64> = parse::<u64>("seeds", a.trim())?..parse::<u64>("seeds", b.trim())?;
        range.collect()
    } else {
        value
            .split(',')
            .map(|s| parse::<u64>("seeds", s.trim()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad("empty seed list"));
    }
    Ok(seeds)
}

fn parse_reals(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|s| parse::<f64>(key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key {
            "n" => self.n = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d_qk" => self.d_qk = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "variant" => self.variant = parse(key, value)?,
            "lambda_tilde" => self.lambda_tilde = parse(key, value)?,
            "lambdas" => self.lambdas = parse_reals(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "tol" => self.tol = Some(parse(key, value)?),
            "residual" => self.residual = parse_bool(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "init" => self.init = parse(key, value)?,
            "score_scale" => self.score_scale = parse(key, value)?,
            "overflow_bound" => self.overflow_bound = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "walk_steps" => self.walk_steps = parse(key, value)?,
            "start" => self.start = parse(key, value)?,
            "min_fraction" => self.min_fraction = Some(parse(key, value)?),
            "min_descent_fraction" => self.min_descent_fraction = Some(parse(key, value)?),
            "fidelity_lambda" => self.fidelity_lambda = parse(key, value)?,
            "values_file" => self.values_file = path(),
            "keys_file" => self.keys_file = path(),
            "queries_file" => self.queries_file = path(),
            "transition_file" => self.transition_file = path(),
            "save_weights" => self.save_weights = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    line: None,
                })
            }
        }
        Ok(())
    }

    /// Applies every assignment in a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (key, value, line) in parse_assignments(text)? {
            self.set(&key, &value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(line) },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.apply_text(&text)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn lambda_list(&self) -> Vec<f64> {
        if self.lambdas.is_empty() {
            vec![self.lambda_tilde]
        } else {
            self.lambdas.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [("n", self.n), ("d", self.d), ("d_qk", self.d_qk), ("layers", self.layers)] {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.steps == 0 || self.samples == 0 {
            return invalid("steps and samples must be positive".into());
        }
        for l in self.lambda_list() {
            if !(l >= 0.0 && l.is_finite()) {
                return invalid(format!("lambda_tilde must be finite and nonnegative, got {l}"));
            }
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return invalid(format!("tol must be positive, got {tol}"));
            }
        }
        for (name, v) in [
            ("init_scale", self.init_scale),
            ("score_scale", self.score_scale),
            ("overflow_bound", self.overflow_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.fidelity_lambda >= 0.0 && self.fidelity_lambda.is_finite()) {
            return invalid(format!("fidelity_lambda must be nonnegative, got {}", self.fidelity_lambda));
        }
        for (name, v) in [("min_fraction", self.min_fraction), ("min_descent_fraction", self.min_descent_fraction)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return invalid(format!("{name} must lie in [0, 1], got {v}"));
                }
            }
        }
        Ok(())
    }
}

/// Splits config text into `(key, value, line)` triples.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                text: raw.into(),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                text: raw.into(),
            });
        }
        out.push((key.to_string(), value.trim().to_string(), idx + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_accepted() {
        let samples = [
            ("n", "4"),
            ("d", "3"),
            ("d_qk", "2"),
            ("layers", "2"),
            ("variant", "neutreno"),
            ("lambda_tilde", "0.5"),
            ("lambdas", "0.1, 0.2"),
            ("steps", "10"),
            ("seed", "3"),
            ("seeds", "0..5"),
            ("tol", "1e-6"),
            ("residual", "true"),
            ("init_scale", "2"),
            ("init", "constant"),
            ("score_scale", "0.5"),
            ("overflow_bound", "1e6"),
            ("samples", "100"),
            ("walk_steps", "3"),
            ("start", "1"),
            ("min_fraction", "0.9"),
            ("min_descent_fraction", "0.8"),
            ("fidelity_lambda", "0.3"),
            ("values_file", "v.tensor"),
            ("keys_file", "k.tensor"),
            ("queries_file", "q.tensor"),
            ("transition_file", "a.tensor"),
            ("save_weights", "yes"),
            ("out", "results"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        let mut cfg = ExperimentConfig::default();
        for (k, v) in samples {
            assert!(KEYS.contains(&k));
            cfg.set(k, v).unwrap();
        }
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.lambdas, vec![0.1, 0.2]);
        assert_eq!(cfg.variant, AttentionVariant::Neutreno);
        assert_eq!(cfg.init, InitKind::Constant);
    }

    #[test]
    fn file_text_and_comments() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# comment\n\nn = 5  # tokens\nvariant=symmetric\n").unwrap();
        assert_eq!(cfg.n, 5);
        assert_eq!(cfg.variant, AttentionVariant::Symmetric);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(
            cfg.apply_text("n = 3\nlayer = 4\n"),
            Err(ConfigError::UnknownKey {
                key: "layer".into(),
                line: Some(2)
            })
        );
        assert!(matches!(cfg.apply_text("n 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(cfg.set("n", "-1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("residual", "maybe"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn later_assignments_win() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("seed = 1\n").unwrap();
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed_list(), vec![9]);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("2..4").unwrap(), vec![2, 3]);
        assert_eq!(parse_seeds("7, 1").unwrap(), vec![7, 1]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert!(parse_seeds("4..4").is_err());
        assert!(parse_seeds("a,b").is_err());
    }

    #[test]
    fn validation() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        for (k, v) in [
            ("n", "0"),
            ("lambda_tilde", "-0.1"),
            ("tol", "0"),
            ("init_scale", "0"),
            ("min_fraction", "1.5"),
            ("steps", "0"),
        ] {
            let mut cfg = ok.clone();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k} = {v}");
        }
    }
}
