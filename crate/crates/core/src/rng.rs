//! Seeded random streams. Every stochastic routine in the crate draws from a
//! `ChaCha8Rng` keyed by `(seed, stream)` so results are pure functions of
//! their arguments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Stream ids used across the crate, kept apart so that adding draws in one
/// place never shifts another.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const HELDOUT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const SAMPLER: u64 = 1 << 32;
}
