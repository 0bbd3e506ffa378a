//! Seed derivation. Every stochastic routine draws from a ChaCha stream keyed
//! by `(seed, path...)`, so results never depend on call order or threading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod tag {
    pub const SCENARIO: u64 = 0x5343;
    pub const SYNTHETIC: u64 = 0x5359;
    pub const VAE_INIT: u64 = 0x5649;
    pub const VAE_BATCH: u64 = 0x5642;
    pub const VAE_NOISE: u64 = 0x564e;
    pub const VAE_GENERATE: u64 = 0x5647;
    pub const VAE_CONDITION: u64 = 0x5643;
    pub const HYBRID: u64 = 0x4859;
    pub const REPAIR: u64 = 0x5250;
    pub const DW: u64 = 0x4457;
    pub const AGENT: u64 = 0x4147;
    pub const SAA_IN: u64 = 0x5349;
    pub const SAA_OUT: u64 = 0x534f;
    pub const SAA_OPT: u64 = 0x5350;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of tags/indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn substream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
