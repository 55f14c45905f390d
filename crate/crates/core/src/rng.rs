//! Named, counter-based random substreams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by a root seed and a
//! list of labels (sample id, eye, corruption kind, ...). Results therefore do
//! not depend on scheduling or on how many draws other work units made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn key(seed: u64, labels: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"disprobe-substream-v1");
    hasher.update(seed.to_le_bytes());
    for label in labels {
        // length prefix keeps ("ab","c") and ("a","bc") apart
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&hasher.finalize());
    out
}

/// Random stream for `(seed, labels...)`.
pub fn substream(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key(seed, labels))
}

/// Derived 64-bit seed for `(seed, labels...)`.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let k = key(seed, labels);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}
