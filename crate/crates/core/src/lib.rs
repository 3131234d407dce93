//! Bayesian covariance estimation with meta-covariate-informed factor
//! loadings (CMR), plus the comparison estimators, multiple-testing tools and
//! simulation harness used to evaluate it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod designs;
pub mod error;
pub mod estimators;
pub mod geweke;
pub mod inference;
pub mod model;
pub mod randcore;
pub mod sampler;
pub mod simharness;
pub mod summary;

pub use error::{CmrError, Result};
