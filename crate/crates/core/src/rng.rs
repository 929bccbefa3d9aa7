//! Seeded random streams.
//!
//! Every stochastic component draws from a SplitMix64 generator (state advance
//! `0x9E3779B97F4A7C15`, output mix constants `0xBF58476D1CE4E5B9` and
//! `0x94D049BB133111EB`). Independent streams are derived from a base seed
//! and a list of integer tags, so results never depend on call order between
//! components.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> SplitMix64 {
    let mut state = mix(seed.wrapping_add(GOLDEN));
    for &t in tags {
        state = mix(state ^ mix(t.wrapping_add(GOLDEN)));
    }
    SplitMix64::seed_from_u64(state)
}

/// Stable tag for a component name.
pub fn tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal draw (Box–Muller; one of the pair is discarded).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
