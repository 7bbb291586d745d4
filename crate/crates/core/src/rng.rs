//! Seed derivation.
//!
//! Every random stream is a `ChaCha8Rng`, which is portable and
//! bit-reproducible across platforms. Per-run seeds come from a SplitMix64
//! mix of `(base seed, run)`; per-instance randomness uses the ChaCha
//! stream id, so instance `i` of run `r` always sees the same draws no
//! matter which worker evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for run `run` under `base`.
pub fn derive_seed(base: u64, run: u64) -> u64 {
    mix64(mix64(base) ^ run.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The generator for one evaluation instance within one run.
pub fn instance_rng(run_seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(instance);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_differ_per_run() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|r| derive_seed(7, r)).collect();
        assert_eq!(seeds.len(), 100);
    }

    #[test]
    fn instance_streams_are_independent_of_order() {
        let a: Vec<u64> = (0..4).map(|i| instance_rng(3, i).gen()).collect();
        let b: Vec<u64> = (0..4).rev().map(|i| instance_rng(3, i).gen()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn chacha_output_is_pinned() {
        // Guards against a silent change of generator or seeding scheme.
        assert_eq!(derive_seed(0, 0), 12035550249420947055);
        assert_eq!(rng_from_seed(derive_seed(0, 0)).gen::<u64>(), 15996116421076522038);
        assert_eq!(instance_rng(1, 0).gen::<u32>(), 2359561649);
    }
}
