//! Seed splitting.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded with
//! `derive_seed(seed, tag, index)`, where `tag` names the purpose
//! (`"train-task"`, `"eval-task"`, ...) and `index` the task or step. The
//! derived seed is
//!
//! ```text
//! splitmix64(splitmix64(seed ^ fnv1a64(tag)) ^ splitmix64(index + GOLDEN))
//! ```
//!
//! so streams for different purposes or indices never depend on the order in
//! which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a64(tag)) ^ splitmix64(index.wrapping_add(GOLDEN)))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
