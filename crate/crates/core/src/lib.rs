//! Bootstrapped contrastive imitation from observation.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of
//! the pipeline: a small reverse-mode autodiff engine, Lab color views, the
//! image/sequence encoders, the contrastive objectives, two procedurally
//! rendered control tasks, and the alignment and interactive training loops.
//! File formats, the CLI and anything touching the filesystem live in the
//! companion `bootifol` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod align;
pub mod config;
pub mod env;
pub mod error;
pub mod interact;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate-wide generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
