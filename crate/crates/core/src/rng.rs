//! Counter-based seed derivation.
//!
//! Every random decision in a run (sampling, shuffles, init, subsampling) is
//! keyed by `(base_seed, domain tag, counters...)` rather than drawn from one
//! shared stream. Strategies that do extra gradient evaluations therefore
//! consume no randomness that could shift later draws, which is what makes
//! the cross-strategy trajectory equivalences exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags; arbitrary distinct constants.
pub const TAG_INIT: u64 = 0x01;
pub const TAG_PARTITION: u64 = 0x02;
pub const TAG_BATCH: u64 = 0x03;
pub const TAG_SAMPLE: u64 = 0x04;
pub const TAG_SYNTH: u64 = 0x05;
pub const TAG_ANCHOR: u64 = 0x06;
pub const TAG_WORKER: u64 = 0x07;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags/counters into a fresh seed.
/// Stable across platforms and releases (no std hasher involved).
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
