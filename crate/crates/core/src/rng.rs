//! Seed derivation. Every randomized stage draws from its own ChaCha8 stream
//! keyed by `SHA-256(seed || tag)`, so a stage can be re-run alone and still
//! reproduce the full pipeline's choices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.finalize().into()
}

pub fn stage_rng(seed: u64, tag: &str) -> StageRng {
    ChaCha8Rng::from_seed(derive_seed(seed, tag))
}

/// Derive a 64-bit sub-seed, for APIs that take a plain seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let d = derive_seed(seed, tag);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
