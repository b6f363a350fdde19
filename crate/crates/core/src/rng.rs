//! Deterministic RNG streams.
//!
//! All randomness in the crate flows through [`rng_from`], which derives an
//! independent ChaCha12 stream from a master seed plus a path of stream
//! tags. The derivation is a SHA-256 of the little-endian words, so streams
//! are stable across platforms and releases.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

pub fn rng_from(master: u64, path: &[u64]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for word in path {
        hasher.update(word.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
