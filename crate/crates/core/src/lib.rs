//! Desk-scale laboratory for a system of coagulating Brownian particles.
//!
//! The crate is organised around three solvers and the glue that compares
//! them:
//!
//! * [`model`] — parameters, interaction kernels, rate and diffusion
//!   policies, initial densities and the parameter-hypothesis checker.
//! * [`cell`] — the elliptic cell problem that turns microscopic rates
//!   `alpha(n, m)` into macroscopic coagulation rates `beta(n, m)`,
//!   together with capacity references.
//! * [`micro`] — the N-particle simulator: independent Brownian motions
//!   plus stochastic pairwise coagulation with mass-weighted merges.
//! * [`pde`] — the truncated Smoluchowski system driven by a beta matrix,
//!   in homogeneous (ODE) and spatial (reaction-diffusion) modes.
//! * [`validation`] — quantitative micro/macro comparisons: density
//!   convergence, collision-propensity audits, the Stosszahlansatz
//!   diagnostic, and the effective-rate discrimination experiment.
//! * [`config`] / [`output`] — experiment configuration, canonical
//!   serialization, hashing, and bit-stable artifact writers.

pub mod cell;
pub mod config;
pub mod error;
pub mod micro;
pub mod model;
pub mod numeric;
pub mod output;
pub mod pde;
pub mod validation;

pub use error::{CoagError, Result};
