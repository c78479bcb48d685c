//! Seed derivation. Every random quantity in the crate is drawn from a
//! ChaCha stream selected by `(seed, stream)`, so a value depends only on its
//! key and never on evaluation order or thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed. Child `i` is unaffected by how many
/// other children are drawn.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    stream(seed, index).next_u64()
}

/// Tagged child seed, for separating purposes (data, init, Monte Carlo) that
/// share one parent.
pub fn tagged_seed(seed: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, folded into the stream id
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    child_seed(seed ^ h, index)
}
