//! Counter-based stream derivation.
//!
//! Every random draw in the crate comes from a [`Stream`] derived as
//! `ChaCha8(SHA-256(master_le ‖ tag ‖ 0x00 ‖ index_le...))`. The same
//! `(master, tag, indices)` triple always yields the same stream, independent
//! of call order, so work items can be computed in any order (or in parallel)
//! with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives the stream for `tag` and a list of item indices.
pub fn stream(master: u64, tag: &str, indices: &[u64]) -> Stream {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0u8]);
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child seed, for handing a sub-component its own master seed.
pub fn child_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    use rand::RngCore;
    stream(master, tag, indices).next_u64()
}

/// Standard-normal vector of length `n`.
pub fn normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
