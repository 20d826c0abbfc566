//! Deterministic random streams.
//!
//! Every consumer of randomness receives an explicit generator; streams are
//! derived from a base seed plus a path of integers (stream tag, epoch,
//! batch, sample index...) so independent parts of a run never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const NSLOSS: u64 = 2;
    pub const PGD: u64 = 3;
    pub const JACOBIAN: u64 = 4;
    pub const METRICS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DATA: u64 = 7;
    pub const EXPLAIN: u64 = 8;
    pub const LAMBDA: u64 = 9;
    pub const EVAL: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Vector of independent standard normal draws.
pub fn standard_normal(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Direction drawn uniformly from the unit sphere in `dim` dimensions.
pub fn unit_direction(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v = standard_normal(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}
