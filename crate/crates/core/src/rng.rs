//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(master seed, repeat index, purpose)`, so running repeats or particles
//! in parallel never changes what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes inside one experiment repeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Reference = 1,
    Snapshots = 2,
    Charest = 3,
    GridPf = 4,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an arbitrary list of words into a 64-bit seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut state = 0x243F_6A88_85A3_08D3u64;
    let mut out = 0u64;
    for &w in words {
        state ^= w;
        out = splitmix64(&mut state);
    }
    out
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Independent stream for one `(master, repeat, purpose)` triple.
pub fn substream(master: u64, repeat: u64, purpose: Purpose) -> SimRng {
    seeded(mix_seed(&[master, repeat, purpose as u64]))
}

/// Counter-based child stream, e.g. one per particle per step.
pub fn child(seed: u64, counter: u64) -> SimRng {
    seeded(mix_seed(&[seed, counter]))
}

/// Seed recorded in the manifest for a repeat.
pub fn repeat_seed(master: u64, repeat: u64) -> u64 {
    mix_seed(&[master, repeat])
}
