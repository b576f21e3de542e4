//! Deterministic random streams.
//!
//! Every stochastic operation takes an explicit stream. Independent streams
//! (per epoch, per sample, per purpose) are derived from the run seed by
//! hashing the coordinates, so work can be replayed or reordered without
//! changing any individual draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `(seed, coords...)`.
pub fn derived(seed: u64, coords: &[u64]) -> Stream {
    stream(derive_seed(seed, coords))
}

/// Purpose tags keep streams for different jobs apart.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const FEATURES: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const ATTENTION: u64 = 7;
    pub const SPLIT: u64 = 8;
}
