//! Seeded RNG plumbing. Every random decision in the crate flows from a
//! `u64` seed through these helpers so runs are reproducible bit-for-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream split: one master seed, independent named substreams.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Standard normal via Box-Muller on the uniform stream.
pub fn randn(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Kaiming-style init: normal with std `sqrt(2 / fan_in)`.
pub fn randn_vec(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| randn(rng) * std).collect()
}
