//! Deterministic, index-derived random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is obtained by
//! folding `(seed, index, tag)` through the SplitMix64 finalizer. Streams
//! depend only on those inputs, never on the order in which work is
//! scheduled, so serial and parallel runs draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a child index into a new seed.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(GOLDEN_GAMMA))
}

/// Named sub-streams so that, e.g., episode sampling and uncertain-class
/// generation for the same episode never share state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    EpisodeSampling,
    Uncertain,
    ViewJitter,
    Synthetic,
}

impl StreamTag {
    fn salt(self) -> u64 {
        match self {
            StreamTag::EpisodeSampling => 0x6570_6973_6f64_6531,
            StreamTag::Uncertain => 0x756e_6365_7274_6169,
            StreamTag::ViewJitter => 0x6a69_7474_6572_7669,
            StreamTag::Synthetic => 0x7379_6e74_6865_7469,
        }
    }
}

pub fn stream(seed: u64, index: u64, tag: StreamTag) -> RngStream {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, tag.salt()), index))
}
