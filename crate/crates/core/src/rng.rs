//! Deterministic random-number streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the run seed, so adding draws to one component never shifts another, and
//! checkpoints can capture an exact stream position.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per stochastic component.
pub mod stream {
    pub const INIT_DEPTH: u64 = 1;
    pub const INIT_SEMANTIC: u64 = 2;
    pub const INIT_TRANSLATOR: u64 = 3;
    pub const INIT_DISCRIMINATOR: u64 = 4;
    pub const INIT_HEIGHT: u64 = 5;
    pub const BATCH_SAMPLING: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const DATA_SCENES: u64 = 8;
}

/// A ChaCha generator positioned at the start of `(seed, stream)`.
///
/// The same pair always yields the same sequence on every platform.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a ChaCha stream, used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = stream_rng(self.seed, self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
