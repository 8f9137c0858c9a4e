//! Named random streams expanded from a single root seed.
//!
//! Every stage draws from its own stream so that re-seeding one stage (or
//! resuming a run part-way) never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const TRAJECTORY_NOISE: &str = "trajectory-noise";
pub const HOLE_PUNCH: &str = "hole-punch";
pub const EPSILON: &str = "epsilon";
pub const WEIGHT_INIT: &str = "weight-init";
pub const SPLIT_SHUFFLE: &str = "split-shuffle";
pub const BATCH_ORDER: &str = "batch-order";
pub const SAMPLING: &str = "sampling";

/// Deterministic generator for `(root, purpose, index)`.
pub fn stream(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
