//! Seeded, resumable random number generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Serializable position of a [`ChaCha8Rng`] stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position split into high and low halves (JSON has no u128).
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn capture(rng: &ChaCha8Rng, seed: u64) -> RngState {
    let pos = rng.get_word_pos();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos_hi: (pos >> 64) as u64,
        word_pos_lo: pos as u64,
    }
}

pub fn restore(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
    rng
}
