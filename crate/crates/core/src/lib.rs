//! Privacy-aware partition and compression search for split DNN inference.
//!
//! A model is split into an on-device encoder and a cloud stub. The search
//! picks the partition point and per-layer compression techniques that
//! balance task accuracy, leakage to inversion and property-inference
//! adversaries, and on-device cost.

pub mod adversary;
pub mod baselines;
pub mod compress;
pub mod controller;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Seeded generator used for every stochastic component.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Seed derived from a label and a base seed, stable across runs and platforms.
pub fn seed_for(label: &str, seed: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
