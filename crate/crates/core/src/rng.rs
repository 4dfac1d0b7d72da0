//! Reproducible random streams.
//!
//! Every replica (path, field sample, coupled pair) draws from its own ChaCha8
//! stream selected by `(seed, index)`, so results do not depend on scheduling or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream number `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a label into a seed so independent experiments in one run do not share streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label.bytes().fold(splitmix(seed), |h, b| splitmix(h ^ b as u64))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
