//! Attention as nonlocal smoothing: dense attention variants, the
//! variational functional they descend, a Markov-chain view of repeated
//! attention, and tools to measure over-smoothing across depth.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod linalg;
pub mod model_stack;
pub mod random_walk;

pub use attention::{AttentionVariant, NeutrenoParams, ProjectionSet};
pub use error::{Error, Result};
pub use linalg::{Matrix, TokenMatrix};
pub use random_walk::{StationaryDistribution, TransitionMatrix};
