//! Seeded randomness shared by every stochastic component.

use crate::divergence::Categorical;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

pub type SeedRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a run seed with a stream tag (iteration index, purpose, ...) into an
/// independent seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw from the probability simplex: normalized i.i.d. Exp(1) variates.
pub fn flat_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Categorical {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    Categorical::new(draws.into_iter().map(|x| x / total).collect()).expect("valid simplex draw")
}
