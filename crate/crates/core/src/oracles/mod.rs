//! Independent reference solvers used to validate the trained policies.

pub mod binomial;
pub mod black_scholes;
pub mod fd;
pub mod heston;
pub mod lsm;

pub use binomial::binomial_put;
pub use black_scholes::{black_scholes, norm_cdf, OptionKind};
pub use fd::{fd_american_put, Exercise, FdControls, FdGrid};
pub use heston::{heston_call, heston_call_with, HestonQuote, Quadrature};
pub use lsm::{lsm_price, LsmConfig, LsmResult};
