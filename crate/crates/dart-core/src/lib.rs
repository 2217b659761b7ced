//! Core library for robust unsupervised domain adaptation on tabular data:
//! a small autodiff-by-hand tensor kernel, MLP domain-adversarial models,
//! L-infinity attacks, two-step robustification with a frozen teacher, and
//! empirical audits of the generalization bound the two-step recipe rests
//! on.

pub mod attack;
pub mod checks;
pub mod config;
pub mod data;
pub mod eval;
pub mod hashing;
pub mod model;
pub mod pilot;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
