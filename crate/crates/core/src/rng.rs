//! Seeded generators. Every random choice in the crate goes through here so a
//! `(seed, stream)` pair fully determines it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelInit = 1,
    PromptInit = 2,
    Split = 3,
    MixSample = 4,
    MixShuffle = 5,
    GeneralEval = 6,
    EpochOrder = 7,
    PretrainOffset = 8,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
