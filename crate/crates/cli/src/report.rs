//! Check results, run summaries and CSV emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neutreno_core::dynamics::DynamicsTrace;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// One pass/fail criterion evaluated by a command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: Comparison::AtMost,
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: Comparison::AtLeast,
            threshold,
            passed: value >= threshold,
        }
    }
}

/// What a command prints to stdout: checks, written files and metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub passed: bool,
    pub failures: Vec<String>,
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
    pub metrics: Value,
}

impl Summary {
    pub fn new(command: &str, checks: Vec<Check>, outputs: Vec<PathBuf>, metrics: Value) -> Self {
        let failures: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        Self {
            command: command.into(),
            passed: failures.is_empty(),
            failures,
            checks,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }
}

/// Fixed 17-significant-digit form, which round-trips every double.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub const DYNAMICS_HEADER: &str = "step,mean_cosine,j_value,max_pairwise,diverged";
pub const STACK_HEADER: &str = "layer,mean_cosine,j_value,max_pairwise";

pub fn dynamics_csv(trace: &DynamicsTrace) -> String {
    let mut out = String::from(DYNAMICS_HEADER);
    out.push('\n');
    for r in trace.records() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            real(r.mean_cosine),
            real(r.j_value),
            real(r.max_pairwise),
            u8::from(r.diverged)
        );
    }
    out
}

pub fn stack_csv(trace: &DynamicsTrace) -> String {
    let mut out = String::from(STACK_HEADER);
    out.push('\n');
    for r in trace.records() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            real(r.mean_cosine),
            real(r.j_value),
            real(r.max_pairwise)
        );
    }
    out
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}
