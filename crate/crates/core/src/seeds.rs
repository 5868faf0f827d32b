//! Named seed derivation. Every random component draws from its own stream
//! derived from the master seed, so any one of them can be reseeded in
//! isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed from `parent`, a stream name and an index.
pub fn derive(parent: u64, stream: &str, index: u64) -> u64 {
    let a = splitmix64(parent ^ fnv1a(stream));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Mixes an arbitrary list of words into one seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x2545_f491_4f6c_dd1d, |h, &w| splitmix64(h ^ splitmix64(w)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream names used by the harness.
pub mod stream {
    pub const TERRAIN: &str = "terrain";
    pub const LIDAR: &str = "lidar";
    pub const POLICY: &str = "policy";
    pub const INIT: &str = "init";
    pub const META: &str = "meta";
    pub const MPPI: &str = "mppi";
    pub const BASELINE: &str = "baseline";
    pub const NAV: &str = "nav";
}
