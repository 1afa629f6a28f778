//! Seeded randomness. Every stochastic routine takes a `u64` seed and derives a
//! ChaCha8 stream from it, so identical seeds reproduce identical results on
//! every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Generator for `seed`, on an independent `stream` so that different
/// consumers of one experiment seed never share draws.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream identifiers; one per consumer.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const BLOBS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const TARGETS: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const PROBE: u64 = 7;
}

/// Uniform draw from `[0, 1)`.
#[inline]
pub fn uniform(rng: &mut Rng) -> f64 {
    rand::Rng::random::<f64>(rng)
}
