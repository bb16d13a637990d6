//! Deterministic randomness.
//!
//! Every random draw in the crate goes through a [`RandomnessContext`]. A
//! context is a `(global_seed, stream_id)` pair; stream ids are derived by
//! hashing a label and an index, so `("train", 0)` and `("infer", 0)` give
//! unrelated streams under the same global seed. Sequences are stable within
//! one version of this crate only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomnessContext {
    pub global_seed: u64,
    pub stream_id: u64,
}

fn stream_hash(global_seed: u64, parent: Option<u64>, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    match parent {
        Some(p) => {
            h.update([1u8]);
            h.update(p.to_le_bytes());
        }
        None => h.update([0u8]),
    }
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Derives the stream for `(label, index)` under `global_seed`.
pub fn derive_stream(global_seed: u64, label: &str, index: u64) -> RandomnessContext {
    RandomnessContext {
        global_seed,
        stream_id: stream_hash(global_seed, None, label, index),
    }
}

impl RandomnessContext {
    /// Derives a sub-stream; used to split one per-image stream into stages.
    pub fn child(&self, label: &str, index: u64) -> RandomnessContext {
        RandomnessContext {
            global_seed: self.global_seed,
            stream_id: stream_hash(self.global_seed, Some(self.stream_id), label, index),
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.global_seed.to_le_bytes());
        h.update(self.stream_id.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}
