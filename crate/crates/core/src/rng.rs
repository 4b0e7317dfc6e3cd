//! Deterministic named RNG streams.
//!
//! A master seed is split into independent ChaCha streams by hashing a stream
//! label plus integer coordinates, so adding a new consumer never perturbs the
//! draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit seed from `(master, label, coords)`.
pub fn derive_seed(master: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

/// Opens the stream `(master, label, coords)`.
pub fn stream(master: u64, label: &str, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, coords))
}
