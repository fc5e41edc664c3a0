//! Deterministic derivation of per-item RNG streams from a single run seed.
//!
//! All randomness in this crate flows from one `u64` seed. Independent
//! streams (one per synthesized sentence, one per library unit) are derived
//! by mixing the seed with a stable identifier, so results do not depend on
//! processing order or parallelism degree.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Stable across platforms and releases.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over raw bytes. Used to key RNG streams by unit string; the std
/// hasher is not guaranteed stable, this one is.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stream seed for sentence `index` under run seed `seed`:
/// `splitmix64(splitmix64(seed) ^ splitmix64(index + 1))`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(1)))
}

/// RNG for one synthesized sentence.
pub fn sentence_rng(seed: u64, sentence_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, sentence_index))
}

/// RNG for one (level, unit) reservoir. `level_tag` disambiguates the same
/// string appearing at different levels.
pub fn unit_rng(seed: u64, level_tag: u8, unit: &str) -> ChaCha8Rng {
    let mut h = fnv1a64(unit.as_bytes());
    h ^= splitmix64(u64::from(level_tag) | 0xA5A5_0000);
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ h))
}
