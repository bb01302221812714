//! Named child random streams derived from one run seed.
//!
//! Every consumer of randomness asks for a stream by name (`"data"`,
//! `"init.tracker"`, `"train.batch"`, ...), so adding a new consumer never
//! shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed of the child stream `name` under `seed`.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name.as_bytes())))
}

/// Seed of the `index`-th member of a stream (per-video, per-iteration).
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(child_seed(seed, name) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(child_seed(seed, name))
}

pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(indexed_seed(seed, name, index))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
