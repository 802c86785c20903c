//! Counter-based seeding: every random stream is derived from a tuple of
//! integers, so results do not depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    let mut h = 0x6a09_e667_f3bc_c908_u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream tags keep the purposes of different generators apart.
pub mod tag {
    pub const SENSOR: u64 = 1;
    pub const PARTICLE: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const ODOMETRY: u64 = 5;
    pub const TRUTH: u64 = 6;
    pub const REFERENCE: u64 = 7;
}
