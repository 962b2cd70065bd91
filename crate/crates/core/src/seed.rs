//! Seed splitting.
//!
//! A run has one global seed. Components draw from independent streams whose
//! seeds are derived as `mix(seed ^ fnv1a64(label))`, and per-item streams
//! (sessions, episodes) as `mix(stream_seed ^ mix(index + 1))`, where `mix` is
//! the SplitMix64 finalizer. Changing one component's consumption never shifts
//! another component's random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named component streams used by the pipeline.
pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const REM: &str = "rem";
pub const BATCH: &str = "batch";
pub const EVAL: &str = "eval";
pub const WORLD: &str = "world";
pub const MDP: &str = "mdp";
pub const TEST: &str = "test";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a, for hashing data as it is written.
#[derive(Clone, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a64(label.as_bytes()))
}

pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(1)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, label: &str) -> Rng {
    rng_from(stream_seed(seed, label))
}
