//! Counter-based random streams.
//!
//! Each consumer derives an independent generator from `(seed, stream, index)`
//! rather than pulling from one shared generator, so per-sample draws do not
//! depend on evaluation order. This is what lets parallel loops reproduce the
//! sequential results bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream discriminants. Values are stable identifiers; never reorder them.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const LIGS: u64 = 4;
    pub const CORRUPT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const EXTRACT: u64 = 7;
    pub const EVAL: u64 = 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mix a seed with a list of domain parts into a single 64-bit key.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut acc = splitmix64(&mut state);
    for &p in parts {
        state ^= p.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Deterministic generator for `(seed, stream, counters...)`.
pub fn stream_rng(seed: u64, stream_id: u64, counters: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(counters.len() + 1);
    parts.push(stream_id);
    parts.extend_from_slice(counters);
    ChaCha8Rng::seed_from_u64(mix(seed, &parts))
}
