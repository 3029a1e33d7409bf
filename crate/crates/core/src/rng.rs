//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (environment resets, parameter init, action
//! sampling, exploration, reservoir replacement) draws from its own stream so
//! that adding draws in one component never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for substream `name` with an extra integer index (task, episode, ...).
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ fnv1a(name)) ^ splitmix(index.wrapping_add(0x5851_F42D)))
}

pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, index))
}
