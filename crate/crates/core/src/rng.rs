//! Named, hash-derived random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the
//! global seed plus a path (stream name, step, node path, ...), so results
//! do not depend on the order or thread in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::grid::Grid;

pub type StreamRng = ChaCha8Rng;

/// Derives a 32-byte stream key from `seed`, a stream name and a numeric path.
pub fn derive_key(seed: u64, stream: &str, path: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

pub fn stream(seed: u64, name: &str, path: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_key(seed, name, path))
}

pub fn standard_normal_grid(rng: &mut StreamRng, height: usize, width: usize) -> Grid {
    let data = (0..height * width)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Grid::from_vec(height, width, data).expect("length matches by construction")
}
