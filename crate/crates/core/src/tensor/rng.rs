//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`), whose output is stable
//! across platforms and crate versions, so a seed fully determines a run.
//! Independent streams are derived from a base seed and a label with
//! SplitMix64 mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the sub-stream `label` of `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = splitmix(seed);
    for b in label.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> Rng {
    seeded(derive(seed, label))
}
