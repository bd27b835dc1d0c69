//! Seed derivation for reproducible parallel trials.
//!
//! Every random quantity in a trial comes from its own ChaCha stream keyed by
//! `(master seed, trial index, stream)`, so results never depend on how trials
//! are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent random streams used inside one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Bit = 2,
    Target = 3,
    Craft = 4,
    Dp = 5,
    Reference = 6,
    Bounds = 7,
    Check = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed, an index and a stream tag into a child seed.
pub fn derive_seed(master: u64, index: u64, stream: Stream) -> u64 {
    let a = splitmix64(master);
    let b = splitmix64(a ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ (stream as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, index: u64, stream: Stream) -> SimRng {
    seeded(derive_seed(master, index, stream))
}
