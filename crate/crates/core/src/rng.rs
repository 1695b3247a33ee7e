//! Seed derivation.
//!
//! Every random decision in a run is drawn from a ChaCha stream whose key is
//! derived from the experiment seed and a path of integer labels, so streams
//! never share state and can be handed to threads independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in the seed tree. Cheap to copy; children are derived by mixing
/// labels into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

// Stream labels used across the crate.
pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_CLIENT: u64 = 4;
pub(crate) const STREAM_PRETRAIN: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    pub fn child(self, label: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
