//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`SimRng`] derived from a run
//! seed and a path of stream identifiers (task index, sample index, ...), so a
//! result never depends on scheduling or on how work is batched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

/// Stream domains. Keeping them distinct prevents accidental reuse of a
/// stream between, say, data generation and training.
pub mod domain {
    pub const DATA: u64 = 0x01;
    pub const CONDITIONS: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const TRAIN: u64 = 0x04;
    pub const SPLIT: u64 = 0x05;
    pub const HOLDOUT: u64 = 0x06;
    pub const PSEUDO: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const ROLLOUT_ENV: u64 = 0x09;
    pub const ROLLOUT_POLICY: u64 = 0x0a;
    pub const LP: u64 = 0x0b;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed and a stream path into a 64-bit key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_key(seed, path))
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
