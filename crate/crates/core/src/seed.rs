//! Counter-based seed derivation.
//!
//! Every random draw in a run is keyed by a tuple of counters (run seed,
//! image id, epoch, copy index, ...) rather than by the position of the draw
//! in a sequential stream, so any single draw can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes an ordered list of counters into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(p.wrapping_add(GOLDEN)))
    })
}

/// Domain tags keep streams used for different purposes disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Augment = 1,
    Shuffle = 2,
    Dropout = 3,
    Init = 4,
    Variance = 5,
    Synth = 6,
}

/// Seed for the augmentation of copy `slot` of image `image_id` in `epoch`.
pub fn aug_seed(run_seed: u64, image_id: usize, epoch: u64, slot: u64) -> u64 {
    derive(&[Stream::Augment as u64, run_seed, image_id as u64, epoch, slot])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(stream as u64);
    all.extend_from_slice(parts);
    rng(derive(&all))
}
