//! Deterministic seed derivation.
//!
//! Every random draw in the simulator comes from a ChaCha stream whose seed is
//! a pure function of the run seed and a set of integer coordinates (layer,
//! cycle, row, ...). Work can therefore be split across threads in any way
//! without changing a single sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeps e.g. the D2D stream of layer 3 disjoint from the
/// read-noise stream of layer 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    D2d = 4,
    ReadNoise = 5,
    WriteNoise = 6,
    Subset = 7,
    Spikes = 8,
    Snn = 9,
    Misc = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a domain tag and coordinates into a new seed.
pub fn derive_seed(seed: u64, domain: Domain, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(domain as u64));
    for &c in coords {
        h = splitmix64(h ^ c.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

/// A fresh ChaCha8 stream for the given coordinates.
pub fn stream(seed: u64, domain: Domain, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, coords))
}
