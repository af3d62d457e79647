//! Counter-based seed splitting.
//!
//! Every random stream in the toolkit is derived from a master seed plus a
//! `(stream, index)` pair, so parallel work produces the same numbers
//! regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; keep them distinct so unrelated consumers never share draws.
pub mod stream {
    pub const PERMUTATION: u64 = 0x7065_726d;
    pub const KMEANS_RESTART: u64 = 0x6b6d_6e73;
    pub const NULL_RUN: u64 = 0x6e75_6c6c;
    pub const NULL_COLUMN: u64 = 0x636f_6c73;
    pub const SIMULATE: u64 = 0x7369_6d75;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn split_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)).wrapping_add(index))
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(master, stream, index))
}
