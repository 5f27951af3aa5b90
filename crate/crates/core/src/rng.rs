//! Deterministic randomness.
//!
//! All sampling goes through xoshiro256++ seeded with splitmix64, integer-based
//! uniform draws, and Box–Muller for Gaussians, so generated data is identical
//! across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type DetRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> DetRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// One splitmix64 step; used to derive independent stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of item `index` in stream `stream` derived from `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)).wrapping_add(index))
}

/// A pair of independent standard normal draws (Box–Muller).
pub fn normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // 1 - U lies in (0, 1], keeping the logarithm finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], sigma: f64) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = normal_pair(rng);
        pair[0] = a * sigma;
        pair[1] = b * sigma;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(rng).0 * sigma;
    }
}
