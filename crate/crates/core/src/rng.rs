//! Counter-based random streams.
//!
//! Every draw in the pipeline comes from a ChaCha8 stream addressed by a
//! `(seed, index, view)` triple, so records can be generated in any order or
//! on any number of workers with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Views reserved per index when packing `(index, view)` into a stream id.
const VIEWS_PER_INDEX: u64 = 16;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for a named pipeline stage ("dataset", "pretrain", ...).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Stream for `(seed, index, view)`; `view` must be below 16.
pub fn stream(seed: u64, index: u64, view: u64) -> Stream {
    assert!(view < VIEWS_PER_INDEX, "view {view} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(VIEWS_PER_INDEX) + view);
    rng
}

/// Single stream for a stage that needs only one.
pub fn stage_stream(seed: u64, label: &str) -> Stream {
    stream(derive_seed(seed, label), 0, 0)
}
