//! Spectral-Galerkin simulation of McKean-Vlasov SPDEs driven by cylindrical
//! alpha-stable noise.
//!
//! The state space is truncated to the first `N` eigenmodes of a diagonal
//! operator with power-law spectrum. On top of that sit an exact sampler for
//! the stochastic convolution, an interacting-particle closure of the law
//! term, the slow-fast system with its averaged limit, and batch studies of
//! the convergence rates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod error;
pub mod experiments;
pub mod measure;
pub mod multiscale;
pub mod noise;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use spectral::{OperatorSpec, SpectralField};
