//! Monte Carlo estimators for parameter gradients of expectations of
//! parameterized jump diffusions.
//!
//! The generator-gradient estimator only simulates the base state and its
//! variation flows (`d + d^2` scalars, `d + d^2 + d^2(d+1)/2` when the
//! volatility depends on the parameter), independently of the parameter
//! dimension. The pathwise estimator and a common-random-number finite
//! difference serve as baselines and oracles.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod estimators;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod zoo;


pub use model::{Dims, ModelEval, ModelSpec};
pub use sim::SimConfig;
