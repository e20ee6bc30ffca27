//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream, counter)`; each counter owns a
//! window of 64 ChaCha words, so draws for one voxel or sample never depend on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS_PER_COUNTER: u128 = 64;

pub fn counter_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(counter as u128 * WORDS_PER_COUNTER);
    rng
}
