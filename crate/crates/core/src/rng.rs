//! Named, seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, name)`. Keying on the name makes initialisation and sampling
//! order-independent: adding a parameter never reshuffles the values of
//! the others, and results are bit-stable across runs and platforms.

use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash; used only to mix names into stream keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic stream for `(seed, name)`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(name.len() as u64).to_le_bytes());
    key[24..32].copy_from_slice(b"mmf-rng\0");
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `[0, 1)` with 53 bits of entropy.
///
/// The mapping is fixed here rather than delegated to a distribution
/// type so the bit pattern can never change under a dependency upgrade.
pub fn next_unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn next_range(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + next_unit_f64(rng) * (hi - lo)
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<R: RngCore, E>(v: &mut [E], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        v.swap(i, j);
    }
}

/// `n` uniform draws in `[lo, hi)`.
pub fn uniform_vec(rng: &mut impl RngCore, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| next_range(rng, lo, hi)).collect()
}
