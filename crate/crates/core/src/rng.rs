//! Seeded random streams.
//!
//! Every consumer of randomness draws from a named sub-stream of one root
//! seed ("mask", "init", "shuffle", "augment", ...), so toggling one part of
//! a run never shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
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

/// Derives the seed of the sub-stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix(root ^ fnv1a(name.as_bytes()))
}

/// A generator for the named sub-stream.
pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

/// A generator for item `index` of the named sub-stream.
pub fn indexed_stream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix(derive_seed(root, name) ^ splitmix(index)))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
