//! Seeded random streams.
//!
//! Every source of randomness in a run is a [`RngStream`] whose seed is
//! derived from a master seed and a list of integer tags, so that the
//! stream a worker sees does not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type RngStream = ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master` with each tag in order. Distinct tag lists give
/// unrelated seeds; the function is pure and platform independent.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |acc, &t| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(t))
    })
}

pub fn stream(seed: u64) -> RngStream {
    RngStream::seed_from_u64(seed)
}

pub fn derived_stream(master: u64, tags: &[u64]) -> RngStream {
    stream(derive_seed(master, tags))
}

/// Tags used to separate the streams of one run.
pub mod tag {
    pub const SIGNS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const WORKER: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const STOPPING: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const CELL: u64 = 8;
    pub const DATA: u64 = 9;
    pub const GRAPH: u64 = 10;
}
