//! Total-correlation toolkit.
//!
//! Closed-form Gaussian total correlation, the minibatch estimators used by
//! TC-penalised VAEs (naive, MWS, MSS) together with the density-ratio
//! estimator, constructive mean/sample disparity instances, a small
//! hand-written MLP, a toy Gaussian-encoder VAE with the β-TC / RTC / DIP
//! objective family, and the SAP / MIG disentanglement metrics.
//!
//! Everything is `f64` and deterministic given a seed.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod metrics;
pub mod nn;
pub mod theory;
pub mod vae;

pub use error::{Error, Result};

/// Seeded random stream used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's RNG from a `u64` seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
