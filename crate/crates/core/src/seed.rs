//! Counter-based seed derivation so that independent stages and runs draw
//! from non-overlapping streams regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod stream {
    pub const RUN: u64 = 0x52554e;
    pub const ROUND: u64 = 0x524e44;
    pub const CLUSTER: u64 = 0x434c53;
    pub const SEGMENT: u64 = 0x534547;
    pub const ABUNDANCE: u64 = 0x414244;
    pub const VARIABILITY: u64 = 0x564152;
    pub const NOISE: u64 = 0x4e4f49;
    pub const MONTE_CARLO: u64 = 0x4d4352;
    pub const TUNING: u64 = 0x54554e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th member of stream `tag` under `master`.
pub fn derive(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: u64, index: u64) -> Rng {
    rng(derive(master, tag, index))
}
