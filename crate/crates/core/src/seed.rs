//! Deterministic seed partitioning.
//!
//! Every Monte Carlo unit (episode, trial, rollout) draws from its own
//! ChaCha stream whose seed is a hash of `(root, stream, index)`. Results
//! therefore never depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams so that unrelated consumers of one root seed never
/// share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Episode = 1,
    RateSample = 2,
    RatePurify = 3,
    Dataset = 4,
    Rollout = 5,
    PolicySample = 6,
    Init = 7,
    Random = 8,
    Exhaustive = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng_for(root: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive(root, stream, index))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
