//! Deterministic RNG stream derivation.
//!
//! Every sampling operation in the workspace draws from a named substream
//! derived from a master seed, so datasets, training runs, and Monte-Carlo
//! evaluations are reproducible and can be parallelized without sharing
//! RNG state. Substreams are derived by hashing the parent state with a
//! label, which makes them independent of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A node in the seed-derivation tree.
///
/// `SeedStream::root(master).child("task").child_idx("block", i).rng()`
/// yields the same generator no matter where or when it is evaluated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedStream {
    state: [u8; 32],
}

impl SeedStream {
    pub fn root(master_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"cfeq-seed-root");
        h.update(master_seed.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Derive a labelled substream.
    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x01]);
        h.update(label.as_bytes());
        Self { state: h.finalize().into() }
    }

    /// Derive an indexed substream, e.g. one per task or per block.
    pub fn child_idx(&self, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0x02]);
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.state)
    }
}
