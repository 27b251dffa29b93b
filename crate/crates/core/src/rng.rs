//! Seeding and sampling primitives shared by every stochastic component.
//!
//! All randomness comes from PCG64 (PCG XSL-RR 128/64, `rand_pcg::Pcg64`).
//! A component never seeds from the raw user seed directly; it derives a
//! stream seed with [`derive_seed`] (FNV-1a 64 of the component name, xored
//! into the seed, then passed through the SplitMix64 finalizer) and further
//! splits per item with [`mix`]. Bounded integers use the multiply-shift map
//! `(u64 * n) >> 64` so draws are independent of `rand`'s internal algorithms.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

pub type Rng = Pcg64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Seed for a named component, e.g. `derive_seed(seed, "split")`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(component.as_bytes()))
}

/// Order-sensitive combination of a seed with item identifiers
/// (sample index, coalition mask, bin index, ...).
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

pub fn component_rng(seed: u64, component: &str) -> Rng {
    rng_from(derive_seed(seed, component))
}

/// Uniform integer in `0..n` (`n > 0`).
pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

pub fn uniform_u64(rng: &mut Rng) -> u64 {
    rng.next_u64()
}

/// Uniform real in `[0, 1)` with 53 bits of precision.
pub fn uniform_f64(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// In-place Fisher-Yates shuffle driven by [`uniform_index`].
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Uniform subset of `{0..d}` of the given size, as a bitmask.
pub fn subset_mask(rng: &mut Rng, d: usize, size: usize) -> u64 {
    debug_assert!(size <= d && d <= 64);
    let mut idx: Vec<usize> = (0..d).collect();
    // partial Fisher-Yates: the first `size` slots become the sample
    for i in 0..size {
        let j = i + uniform_index(rng, d - i);
        idx.swap(i, j);
    }
    idx[..size].iter().fold(0u64, |m, &i| m | (1u64 << i))
}
