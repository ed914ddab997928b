//! Fitting one-hidden-layer perceptrons with multidimensional output under
//! the log-determinant residual-covariance cost, and testing how many of
//! their weights are nonzero.
//!
//! The main entry points are [`estimate::minimize`] for fitting,
//! [`hypothesis::t_statistic`] for the nested-model test and
//! [`simulate::run_replications`] for Monte Carlo studies.

#![allow(clippy::needless_range_loop)]

pub mod cost;
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod hypothesis;
pub mod linalg;
pub mod mlp;
pub mod simulate;

pub use cost::{CostKind, Dataset};
pub use error::{Error, Result};
pub use linalg::SymMatrix;
pub use mlp::{Architecture, ParameterMask, WeightVector};
