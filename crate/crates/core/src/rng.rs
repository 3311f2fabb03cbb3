//! Seeded random streams.
//!
//! Every generator is a ChaCha8 instance keyed by a 64-bit seed and a stream
//! id. ChaCha is counter based, so distinct `(seed, stream)` pairs give
//! independent sequences and a replication can be regenerated from its seed
//! alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags; each maps to its own ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Covariates = 1,
    Treatments = 2,
    Noise = 3,
    Membership = 4,
    Dirichlet = 5,
    Init = 6,
    Shuffle = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derives a child seed from a parent seed and a label (splitmix64 finalizer).
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    let mut z = parent
        .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
