//! Deterministic seed derivation.
//!
//! Every randomized stage derives its own generator from the run seed so that
//! stages (and parallel tasks within a stage) are independent and
//! reproducible. `std::hash` is not stable across releases, so family names
//! are hashed with a fixed FNV-1a.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash; stable across platforms and toolchain versions.
pub fn stable_hash64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby integer seeds.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a per-family task: run seed xor family-name hash.
pub fn family_seed(seed: u64, family: &str) -> u64 {
    seed ^ stable_hash64(family)
}

/// Seed for the i-th task of an indexed pool (trees, classes, ...).
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(1)))
}

/// The project-wide deterministic generator.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
