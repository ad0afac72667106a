//! Deep empirical risk minimization for stopping, hedging and portfolio problems.
//!
//! Policies and free boundaries are small neural networks trained by
//! stochastic gradient descent on simulated market paths. Independent
//! numerical solvers in [`oracles`] provide the reference values.

// `!(x > 0.0)` is used on purpose throughout: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Time-stepping loops index several parallel arrays by date, and pricing
// functions take the market parameters positionally.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod hedging;
pub mod markets;
pub mod merton;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod payoff;
pub mod rng;
pub mod stopping;
pub mod tensor;
pub mod train;

pub use error::{DermError, Result};
