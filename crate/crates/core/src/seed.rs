//! Named seed derivation: every random component draws from a child seed
//! computed from the global seed and a component label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `label` under `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ fnv1a(label.as_bytes()))
}

/// Child seed for an indexed item (batch element, prompt, repetition).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(derive(seed, label) ^ splitmix(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, label: &str) -> ChaCha8Rng {
    rng(derive(seed, label))
}
