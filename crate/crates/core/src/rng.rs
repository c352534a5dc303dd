//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream cipher used as a
//! counter-based generator. A stream is identified by `(seed, purpose, index)`:
//!
//! - the 256-bit key is `seed (u64 LE) || index (u64 LE) || purpose (u64 LE) || 0u64`,
//! - the ChaCha stream id (nonce) is the purpose constant.
//!
//! Distinct purposes therefore never share keystream even for equal seeds and
//! indices, and any stream can be re-created without replaying the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Domain-separation constants for the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Clean-image synthesis.
    Data = 0x6461_7461,
    /// Degradation masks (snow flakes, rain streaks).
    Degrade = 0x6465_6772,
    /// Mock perception oracle noise.
    Oracle = 0x6f72_636c,
    /// Source perturbation noise.
    Noise = 0x6e6f_6973,
    /// Parameter initialisation.
    Init = 0x696e_6974,
    /// Flow time sampling.
    Time = 0x7469_6d65,
    /// Mini-batch order.
    Shuffle = 0x7368_7566,
    /// Dataset split assignment and severities.
    Split = 0x7370_6c74,
    /// Random projections in the energy distance.
    Projection = 0x7072_6f6a,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}

/// SplitMix64 finaliser; used to derive child seeds from `(seed, tag)`.
pub fn mix64(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut StreamRng) -> f64 {
    rng.random::<f64>()
}

/// Fills `out` with standard normal draws.
pub fn fill_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out {
        *v = normal(rng);
    }
}
