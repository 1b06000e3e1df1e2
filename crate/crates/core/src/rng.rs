//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by the root seed, a stream name and optional indices, so
//! each stage is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a child seed from `(root, name, keys)`.
pub fn derive(root: u64, name: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(root ^ fnv1a(name.as_bytes()));
    for &k in keys {
        h = splitmix(h ^ splitmix(k));
    }
    h
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive(root, name, &[]))
}

pub fn keyed(root: u64, name: &str, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(root, name, keys))
}

/// Uniform in `[0, 1)` as a pure function of its key.
pub fn unit(root: u64, name: &str, keys: &[u64]) -> f64 {
    (derive(root, name, keys) >> 11) as f64 / (1u64 << 53) as f64
}
