//! Panel and pseudo-panel estimation of expenditure elasticities.
//!
//! The crate covers the full pipeline: loading long-format household panels,
//! grouping households into cohort cells with income-share weights, the
//! between / cross-section / within / first-difference estimators with the
//! aggregation-heteroscedasticity corrections, two-stage instrumentation,
//! specification diagnostics, the (Q)AIDS share-equation layer and a
//! synthetic data-generating process with a Monte Carlo runner.

pub mod data;
pub mod demand;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod iv;
pub mod linalg;
pub mod mc;
pub mod pseudo;
pub mod regress;
pub mod report;

pub use error::{Error, Result};
