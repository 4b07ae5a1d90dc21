//! Named deterministic random sub-streams.
//!
//! Every source of randomness in a run is derived from one master seed plus a
//! stream name ("init", "pools", "lambda/3", ...). Streams are independent of
//! each other and of the order in which they are created, so adding a
//! consumer never perturbs the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, fixed here so stream derivation never depends on std hasher
/// internals.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(name.as_bytes())))
}

/// Convenience for per-epoch streams such as `mine/0`, `mine/1`, ...
pub fn epoch_stream(seed: u64, name: &str, epoch: usize) -> ChaCha8Rng {
    stream(seed, &format!("{name}/{epoch}"))
}
