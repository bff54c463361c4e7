//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed for the substream `name` of `root`.
pub fn derive(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// RNG for substream `name` of `root`.
pub fn rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, name))
}
