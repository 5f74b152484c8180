//! Stateless random-number derivation.
//!
//! Every random draw in the system comes from a `ChaCha8Rng` whose seed is a
//! pure function of the run seed plus a list of context tags (stage, step,
//! item index, purpose). Nothing carries RNG state between steps, which is
//! what makes checkpoint resume bit-exact: a resumed run re-derives the same
//! streams from the same tags.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent uses of randomness in the same (seed, step,
/// item) context from colliding. Values are arbitrary but frozen.
pub mod purpose {
    pub const LANGUAGE: u64 = 0x01;
    pub const SPEAKER: u64 = 0x02;
    pub const UTTERANCE: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const BATCH: u64 = 0x05;
    pub const MASKING: u64 = 0x06;
    pub const MASK_NOISE: u64 = 0x07;
    pub const POSTERIOR: u64 = 0x08;
    pub const CFG_DROPOUT: u64 = 0x09;
    pub const QUANTIZER: u64 = 0x0a;
    pub const PRIOR: u64 = 0x0b;
    pub const KIND_MIX: u64 = 0x0c;
    pub const SIGNAL_MAP: u64 = 0x0d;
    pub const EVAL: u64 = 0x0e;
}

/// One round of the splitmix64 finalizer: a cheap, well-mixed u64 -> u64 hash.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fold a list of context tags into a base seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for (i, &t) in tags.iter().enumerate() {
        // Position-dependent fold so [a, b] and [b, a] differ.
        acc = splitmix(acc ^ t.wrapping_add(0xa076_1d64_78bd_642f).rotate_left((i as u32) % 63));
    }
    acc
}

/// Derive a generator for the given context. The full 256-bit ChaCha seed is
/// expanded from the mixed u64 by further splitmix rounds.
pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let x = mix(seed, tags);
    let mut key = [0u8; 32];
    let mut s = x;
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
