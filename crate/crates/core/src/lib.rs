//! Transfer of a trained regression surrogate from a source task to a related
//! target task.
//!
//! The target is modelled as `f_T(x) = f_S(W·φ(x; θ) + v)`, where `φ` warps each
//! coordinate through a beta CDF, `W` is a rotation and `v` a translation. The
//! transformation is learned from a small transfer dataset, either by mini-batch
//! Riemannian gradient descent (differentiable surrogates) or by CMA-ES over a
//! flat encoding (any surrogate).
//!
//! Module map:
//!
//! - [`specfun`]: log-beta, digamma, regularized incomplete beta and the
//!   log-weighted incomplete beta integrals used for shape derivatives.
//! - [`warp`]: per-coordinate beta-CDF warping and its shape gradients.
//! - [`rotation`]: SO(d) machinery (tangent projection, exponential map, skew codec).
//! - [`surrogate`]: Gaussian-process and bagged-tree surrogates.
//! - [`optimizer`]: CMA-ES and the learning-rate schedule.
//! - [`transfer`]: transfer loss, analytic gradients and the two fitters.
//! - [`benchmarks`]: BBOB base functions and synthetic target construction.
//! - [`harness`]: SMAPE, CSV I/O, experiment driver and config files.

pub mod benchmarks;
pub mod error;
pub mod harness;
pub mod optimizer;
pub mod rotation;
pub mod specfun;
pub mod surrogate;
pub mod transfer;
pub mod warp;

pub use error::{Error, Result};

/// Seeded random source used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random source from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
