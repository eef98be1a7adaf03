//! Seed derivation for reproducible Monte-Carlo runs.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! 64-bit value. Child seeds are derived from a root seed with a counter
//! scheme: `derive_seed(root, stream, index)` mixes the three words with the
//! SplitMix64 finalizer, so trials can be generated in any order (or in
//! parallel) and still reproduce bit-for-bit.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Named stream identifiers so unrelated consumers of one root seed never
/// collide.
pub mod stream {
    pub const CHANNEL_DL: u64 = 1;
    pub const CHANNEL_UL: u64 = 2;
    pub const NOISE_DL: u64 = 3;
    pub const NOISE_UL: u64 = 4;
    pub const BITS: u64 = 5;
    pub const SNR: u64 = 6;
    pub const INIT: u64 = 7;
    pub const CAPACITY: u64 = 8;
    pub const AGENT: u64 = 9;
    pub const EVAL: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, stream: u64, index: u64) -> SimRng {
    rng_from_seed(derive_seed(root, stream, index))
}

/// Circularly-symmetric complex Gaussian with total variance `variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

pub fn random_bits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random::<bool>() as u8).collect()
}
