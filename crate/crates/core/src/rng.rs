//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream whose 256-bit
//! key is `SHA-256("tsrelab/v1" || seed as u64 LE || path bytes)`. Streams are
//! therefore addressed by a `(seed, path)` pair: two parameters never share a
//! stream, adding a parameter never shifts the draws of another, and the
//! output is identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Stream = ChaCha20Rng;

pub fn stream(seed: u64, path: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(b"tsrelab/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(path.as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

pub fn normal_vec(rng: &mut Stream, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Hex SHA-256 of arbitrary bytes; used for config and directory digests.
pub fn digest_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}
