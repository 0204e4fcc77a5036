//! Post-model-selection estimation in Gaussian linear regression: selectors,
//! exact and limiting conditional distributions, estimators of them, and a
//! seeded Monte Carlo harness.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cond_dist;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod montecarlo;
pub mod mvn;
pub mod quadrature;
pub mod regression;
pub mod selection;
pub mod special;

pub use error::{Error, Result};
