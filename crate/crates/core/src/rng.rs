//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a root seed plus a stream name, so components can be re-run
//! independently and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit seed for the named sub-stream of `root`.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derives the seed for item `index` of a named stream (e.g. per-query RNGs).
pub fn derive_indexed_seed(root: u64, stream: &str, index: u64) -> u64 {
    derive_seed(root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream)
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
