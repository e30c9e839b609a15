//! Seed derivation. Every random decision in a run draws from a stream
//! derived from the run seed and a purpose label, so adding a consumer in
//! one phase never shifts the draws of another.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// FNV-1a over the label, folded with the root seed. Stable across
/// platforms and releases; only used to decorrelate sub-streams.
fn mix(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Deterministic generator for one purpose within one run.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label))
}
