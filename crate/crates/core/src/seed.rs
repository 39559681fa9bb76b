//! Seed derivation. Every random draw in a run comes from a ChaCha stream keyed
//! by a hash of the run seed and the coordinates of the draw, so results do not
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of integers.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

// Domain tags keep streams for different purposes apart.
pub(crate) const TAG_POOL: u64 = 1;
pub(crate) const TAG_STREAM: u64 = 2;
pub(crate) const TAG_INIT: u64 = 3;
pub(crate) const TAG_TRAIN: u64 = 4;
pub(crate) const TAG_MC: u64 = 5;
pub(crate) const TAG_BUFFER: u64 = 6;
pub(crate) const TAG_HOLDOUT: u64 = 7;
