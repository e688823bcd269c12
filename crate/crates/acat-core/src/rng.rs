//! Seeded random streams. Every source of randomness in the crate is a
//! [`Prng`] derived from an explicit `u64` seed; substreams give independent
//! deterministic generators per purpose (init, shuffle, noise, per-sample)
//! so work can be sharded without changing results.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub type Prng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Deterministic substream for (`seed`, `label`, `index`). The label is
/// folded in with FNV-1a and the result mixed with splitmix64, so distinct
/// labels or indices give unrelated streams.
pub fn substream(seed: u64, label: &str, index: u64) -> Prng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mixed = splitmix(splitmix(seed ^ h).wrapping_add(index));
    Prng::seed_from_u64(mixed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn uniform_vec(n: usize, lo: f32, hi: f32, rng: &mut Prng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normal_vec(n: usize, mean: f32, sd: f32, rng: &mut Prng) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            mean + sd * z
        })
        .collect()
}
