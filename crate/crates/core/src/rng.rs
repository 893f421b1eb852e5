//! Deterministic seed plumbing.
//!
//! Encoder weights use a stateless counter-based generator so that each
//! weight depends only on `(seed, layer, index)` and plain integer plus
//! floating-point arithmetic, with no platform math library involved.
//! Everything else draws from ChaCha streams whose seeds are split from a
//! root seed by consumer label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` keyed by `(seed, layer, index)`.
pub fn counter_uniform(seed: u64, layer: u64, index: u64) -> f64 {
    let h = mix64(mix64(seed ^ mix64(layer.wrapping_mul(0xA24B_AED4_963E_E407))) ^ index);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Symmetric uniform value in `[-bound, bound)`.
pub fn counter_symmetric(seed: u64, layer: u64, index: u64, bound: f64) -> f64 {
    (2.0 * counter_uniform(seed, layer, index) - 1.0) * bound
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Child seed for a named consumer with integer coordinates.
pub fn derive_seed(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = mix64(root ^ hash_label(label));
    for &c in coords {
        h = mix64(h ^ c.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(root: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, coords))
}
