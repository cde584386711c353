//! Bayesian risk-averse model predictive control.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: continuous-time models, RK4 discretization, stochastic stepping
//!   and the Gaussian transition kernel.
//! - [`filter`]: particle approximation of the parameter posterior.
//! - [`ambiguity`]: credible intervals and the forward-shrinking ambiguity box.
//! - [`risk`]: empirical VaR/CVaR, scenario-based value evaluation, worst case over
//!   a box, and a small finite-MDP solver for nested vs. joint formulations.
//! - [`mpc`]: policy parameterization, warm-start shift, budgeted improvement and
//!   the four receding-horizon controllers.
//! - [`diagnostics`]: blind-zone analysis, KL tracking and Lyapunov descent audits.
//! - [`harness`]: configuration, episodes, benchmark campaigns, CSV and SVG output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ambiguity;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod harness;
pub mod mpc;
pub mod risk;
pub mod stream;

pub use error::{Error, Result};
pub use stream::RandomStream;
