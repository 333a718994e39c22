//! Counter-based random streams: every consumer derives its own generator
//! from the run seed and a position, so no state has to be carried along.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    SourceScene = 1,
    TargetScene = 2,
    TargetTestScene = 3,
    SourceTestScene = 4,
    Shift = 5,
    TestShift = 6,
    Init = 7,
    SourceOrder = 8,
    TargetOrder = 9,
    Sampling = 10,
    Classifier = 11,
    Probe = 12,
}

/// Generator for position `index` of `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// A fresh 64-bit seed drawn from a stream.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, purpose, index).next_u64()
}
