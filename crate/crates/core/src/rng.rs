//! Seed derivation. Every random stream in the crate comes from one master
//! seed combined with a stable hash of the component name, so adding a new
//! consumer never perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, component: &str) -> u64 {
    splitmix(master ^ splitmix(fnv1a(component.as_bytes())))
}

pub fn stream(master: u64, component: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, component))
}

/// Seed plus draw counter. Draw `n` from a given seed is always the same
/// generator, independent of how many other streams were used in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerSeed {
    pub seed: u64,
    pub counter: u64,
}

impl SamplerSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Generator for the current draw; advances the counter.
    pub fn next_rng(&mut self) -> Rng {
        let rng = Rng::seed_from_u64(splitmix(self.seed ^ splitmix(self.counter.wrapping_add(1))));
        self.counter += 1;
        rng
    }
}
