//! Seed derivation and deterministic random number generation.
//!
//! All randomness in the engine flows through ChaCha8 generators seeded
//! through `derive_seed`, so a run is fully determined by the config seeds
//! regardless of data-loading order or thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of the same root seed decorrelated.
pub const STREAM_INIT: u64 = 0x1;
pub const STREAM_SHUFFLE: u64 = 0x2;
pub const STREAM_BAG: u64 = 0x3;
pub const STREAM_EVAL: u64 = 0x4;
pub const STREAM_SYNTH: u64 = 0x5;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix (root, a, b) into a child seed. Used as (global seed, epoch, image
/// index) for per-image augmentation streams.
pub fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    let mut state = root;
    let mut acc = splitmix64(&mut state);
    state ^= a.wrapping_mul(0xff51_afd7_ed55_8ccd);
    acc ^= splitmix64(&mut state);
    state ^= b.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    acc ^= splitmix64(&mut state);
    acc
}

pub fn rng_from(root: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, a, b))
}

/// Standard normal draw via Box-Muller on two uniform deviates.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_sensitive() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
    }

    #[test]
    fn rng_replays_identically() {
        let mut a = rng_from(7, 0, 42);
        let mut b = rng_from(7, 0, 42);
        for _ in 0..64 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn normal_has_sane_moments() {
        let mut rng = rng_from(11, 0, 0);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
