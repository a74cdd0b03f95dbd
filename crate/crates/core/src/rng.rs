//! Deterministic seeding helpers.
//!
//! Every decoding run owns a private ChaCha stream whose seed is derived from
//! stable integer mixing, never from `std::hash` (which is not stable across
//! releases) and never from the wall clock.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lm::Token;

pub type StreamRng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b).rotate_left(17))
}

pub fn hash_str(s: &str) -> u64 {
    // FNV-1a, then finalized.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h)
}

pub fn hash_tokens(salt: u64, tokens: &[Token]) -> u64 {
    let mut h = splitmix(salt ^ (tokens.len() as u64).wrapping_mul(0x9E37));
    for &t in tokens {
        h = mix(h, t as u64);
    }
    h
}

/// Maps a hash to the unit interval `[0, 1)` using its top 53 bits.
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Stream id for one run: `hash(method, task id, seed)`.
pub fn stream_id(label: &str, task_id: u64, seed: u64) -> u64 {
    mix(mix(hash_str(label), task_id), seed)
}

pub fn stream(id: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(id)
}

pub fn run_stream(label: &str, task_id: u64, seed: u64) -> StreamRng {
    stream(stream_id(label, task_id, seed))
}
