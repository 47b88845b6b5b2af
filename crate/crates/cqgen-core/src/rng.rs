//! Seeded randomness with named substreams.
//!
//! All randomness in the crate flows from a single seed through named
//! substreams (`data`, `generator-init`, `coordinator-init`, `rollout`, ...)
//! so individual pipeline stages are reproducible in isolation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

/// Deterministic RNG for the given seed and substream name.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Standard normal sample scaled by `std`, via Box-Muller.
pub fn normal<S: Real>(rng: &mut impl Rng, std: f64) -> S {
    let u1: f64 = 1.0 - rng.random::<f64>(); // in (0, 1]
    let u2: f64 = rng.random::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    S::from_f64(z * std)
}

/// Normal sample truncated to two standard deviations (redrawn otherwise).
pub fn trunc_normal<S: Real>(rng: &mut impl Rng, std: f64) -> S {
    loop {
        let x = normal::<f64>(rng, std);
        if x.abs() <= 2.0 * std {
            return S::from_f64(x);
        }
    }
}

/// Draws an index from an unnormalized non-negative weight vector.
/// Zero-weight entries are never selected.
pub fn categorical<S: Real>(rng: &mut impl Rng, weights: &[S]) -> usize {
    let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
    debug_assert!(total > 0.0, "categorical needs positive total mass");
    let mut dart = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        let w = w.as_f64();
        if w <= 0.0 {
            continue;
        }
        last_positive = i;
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    last_positive
}
