use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadBuffer { rows: usize, cols: usize, len: usize },

    #[error("{op}: non-finite value in row {row}")]
    NonFinite { op: &'static str, row: usize },

    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("matrix is singular or near-singular (pivot {pivot:e} in column {col})")]
    Singular { col: usize, pivot: f64 },

    #[error("{op}: row {row} has a non-positive sum")]
    ZeroRowSum { op: &'static str, row: usize },

    #[error("{op}: column {col} has a non-positive sum")]
    ZeroColSum { op: &'static str, col: usize },

    #[error("not a transition matrix: {0}")]
    NotStochastic(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("{op}: every row is degenerate")]
    Degenerate { op: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
