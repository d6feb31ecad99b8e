//! Derivation of independent, reproducible random streams.
//!
//! Every stochastic choice in training and generation is drawn from a
//! ChaCha stream whose seed is a hash of a tuple such as
//! `(run seed, iteration, bag slot)`. No stream depends on how many values
//! another stream consumed, so resuming or reordering work cannot change
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a tuple of integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(parts))
}

// Domain tags keep streams for different purposes disjoint.
pub(crate) const TAG_BATCH: u64 = 0xBA7C;
pub(crate) const TAG_DROPOUT: u64 = 0xD209;
