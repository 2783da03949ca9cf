//! Deterministic random-number substreams.
//!
//! Every random quantity is drawn from a ChaCha stream addressed by a root
//! seed and a path of integer keys, so results never depend on the order in
//! which parallel work is scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for the key path `path` below `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(seed, |acc, &key| substream(acc, key).next_u64())
}
