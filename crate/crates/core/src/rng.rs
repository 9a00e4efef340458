//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream addressed by
//! `(seed, iteration, purpose)`. Streams are independent of each other and of
//! the order in which they are opened, so a run resumed from iteration `k`
//! replays exactly the draws an uninterrupted run would have made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Pose = 1,
    Background = 2,
    Crop = 3,
    Segments = 4,
    Perturb = 5,
    Init = 6,
    Basis = 7,
    Evaluation = 8,
    Dataset = 9,
}

/// Opens the stream for `(seed, iteration, purpose)`.
///
/// The seed keys the ChaCha8 cipher; iteration and purpose select one of its
/// 2^64 independent streams.
pub fn stream(seed: u64, iteration: u64, purpose: Purpose) -> ChaCha8Rng {
    debug_assert!(iteration < 1 << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 8) | purpose as u64);
    rng
}
