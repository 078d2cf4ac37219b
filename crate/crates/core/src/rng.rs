//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (pretraining, rollouts, evaluation) asks for
//! its own stream by name and index, so results do not depend on the order in
//! which work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a 64-bit seed for substream `(name, index)` of `root`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name)).wrapping_add(index))
}

pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
