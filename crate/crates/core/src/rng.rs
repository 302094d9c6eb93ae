//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a stream addressed by a
//! [`StreamKey`]. Keys form a tree: a master seed is split by level, by time
//! step and by particle index, so the result of a run depends only on the
//! master seed and never on how work is scheduled across threads.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Generator used for all simulation draws.
pub type SimRng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x6a09_e667_f3bc_c908))
    }

    /// Derives an independent sub-stream identified by `tag`.
    pub fn child(self, tag: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn rng(self) -> SimRng {
        SimRng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Tags used to split streams; kept in one place so unrelated consumers never collide.
pub(crate) mod tag {
    pub const PROPAGATE: u64 = 0x02;
    pub const RESAMPLE: u64 = 0x03;
    pub const LEVEL: u64 = 0x04;
    pub const REPLICATE: u64 = 0x05;
    pub const REFERENCE: u64 = 0x06;
    pub const DATA: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
