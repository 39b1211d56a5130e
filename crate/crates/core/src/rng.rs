//! Deterministic randomness helpers.
//!
//! Two flavours are used throughout the crate:
//! - `ChaCha8Rng` streams for anything sequential (dataset generation,
//!   weight init, shuffling), seeded from explicit `u64` seeds;
//! - a counter-based hash for dropout masks, so a mask depends only on
//!   (seed, site, step, element index) and never on call order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, cheap, stable forever.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mixes several seed components into one stream seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243f6a8885a308d3u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Stable 64-bit hash of a site name (dropout layer ids, etc.).
pub fn site_id(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64; // FNV offset basis
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}

/// Uniform value in [0, 1) from a counter; used for dropout masks.
#[inline]
pub fn counter_uniform(seed: u64, index: u64) -> f32 {
    let bits = splitmix64(seed ^ splitmix64(index.wrapping_add(0x1234_5678_9abc_def0)));
    // take the top 24 bits for an exactly representable f32 in [0, 1)
    ((bits >> 40) as f32) * (1.0 / 16_777_216.0)
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal sample via Box-Muller; hand-rolled so the byte stream
/// never shifts under dependency upgrades.
pub fn normal(rng: &mut ChaCha8Rng, mean: f32, std: f32) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    mean + std * z as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_uniform_is_deterministic_and_in_range() {
        for i in 0..1000 {
            let a = counter_uniform(42, i);
            let b = counter_uniform(42, i);
            assert_eq!(a, b);
            assert!((0.0..1.0).contains(&a));
        }
    }

    #[test]
    fn site_ids_differ() {
        assert_ne!(site_id("vit.l0.attn_drop"), site_id("vit.l0.mlp_drop"));
    }

    #[test]
    fn normal_moments_roughly_match() {
        let mut rng = chacha(7);
        let n = 20_000;
        let xs: Vec<f32> = (0..n).map(|_| normal(&mut rng, 0.0, 1.0)).collect();
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
