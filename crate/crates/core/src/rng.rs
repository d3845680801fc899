//! Deterministic seed fan-out.
//!
//! One global seed expands into independent named sub-seeds through a labeled
//! hash, so changing one experiment arm never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Sub-seed for `label` (and optional indices) derived from `seed`.
pub fn sub_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for ix in indices {
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic generator for a labeled sub-stream.
pub fn rng_for(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, label, indices))
}
