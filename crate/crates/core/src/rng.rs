//! Seed splitting for reproducible, thread-count independent simulations.
//!
//! Every stochastic stream is a [`ChaCha8Rng`] seeded from a child seed. Child
//! seeds are derived from the master seed and a path of integer labels by
//! folding each label through SplitMix64:
//!
//! ```text
//! h0 = splitmix64(master)
//! h(i+1) = splitmix64(h(i) ^ splitmix64(label(i) + 0x632B_E59B_D9B4_E019))
//! ```
//!
//! The derivation only depends on `(master, path)`, never on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Concrete generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &label| {
        splitmix64(h ^ splitmix64(label.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

pub fn rng_for(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
