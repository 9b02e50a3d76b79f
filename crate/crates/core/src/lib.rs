//! Shape-constrained Bayesian density deconvolution.
//!
//! Observations `W_i = X_i + U_i` carry heteroscedastic noise of known scale.
//! The latent density of `X` is modelled as a symmetric unimodal mixture of
//! uniforms `U(-θ, θ)` whose mixing density is a finite Dirichlet mixture of
//! Gammas, and the posterior is explored by Gibbs sampling with a
//! Metropolis–Hastings step for the Gamma shapes.

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod quadrature;
pub mod rand_kit;
pub mod sampler;
pub mod simgen;
pub mod special;

pub use error::{Error, Result};
