//! Numerical laboratory for variance-exploding (VE) score-based diffusion models.
//!
//! The crate covers the whole generation pipeline at desk scale:
//!
//! - [`schedules`]: variance schedules `σ̄_t`, polynomial/exponential time grids,
//!   diffusion coefficients and loss weightings.
//! - [`score_net`]: a bias-free deep ReLU score network with explicit backprop.
//! - [`training`]: the empirical denoising objective, full-batch gradient descent
//!   and convergence diagnostics.
//! - [`sampler`]: the exponential-integrator discretization of the reverse VE SDE.
//! - [`gaussian_oracle`]: closed-form scores, iterate laws and terminal KL for
//!   isotropic Gaussian data.
//! - [`error_analysis`]: initialization/discretization/score error terms, schedule
//!   comparison factors and iteration-complexity formulas.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod error_analysis;
pub mod gaussian_oracle;
pub mod numeric;
pub mod quadrature;
pub mod sampler;
pub mod schedules;
pub mod score_net;
pub mod training;

pub use error::{Error, Result};
