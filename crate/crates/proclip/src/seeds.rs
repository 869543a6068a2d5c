//! Seed-stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! a user seed plus a purpose-specific stream id, so independent concerns
//! never share a random sequence and whole runs replay bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const WORLD: u64 = 1;
pub const CORPUS: u64 = 2;
pub const PRETRAIN_CORPUS: u64 = 3;
pub const PRETRAIN_EVAL: u64 = 4;
pub const PRETRAIN_IMAGE_INIT: u64 = 5;
pub const PRETRAIN_TEXT_INIT: u64 = 6;
pub const PROJECTOR_INIT: u64 = 7;
pub const BASELINE_PROJECTOR_INIT: u64 = 8;
pub const GRADCHECK: u64 = 9;
pub const SHUFFLE: u64 = 10;
pub const PRETRAIN_SHUFFLE: u64 = 11;

/// ChaCha8 generator for `(seed, stream)`.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A per-epoch shuffled index permutation, derived from `seed + epoch`.
pub fn epoch_permutation(seed: u64, epoch: u64, stream: u64, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng(seed.wrapping_add(epoch), stream));
    perm
}
