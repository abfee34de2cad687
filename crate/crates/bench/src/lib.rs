//! Seeded synthetic inputs shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n x p` matrix with entries uniform in `[0, 1)`.
pub fn unit_matrix(g: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| g.random_range(0.0..1.0))
}

/// Treatments that depend on the first covariate, plus a smooth outcome.
pub fn observational(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut g = rng(seed);
    let x = unit_matrix(&mut g, n, p);
    let a = DVector::from_fn(n, |i, _| (0.3 + 0.4 * x[(i, 0)] + g.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    let y = DVector::from_fn(n, |i, _| 0.2 - 0.1 * a[i] + 0.05 * x[(i, 1 % p)] + g.random_range(-0.02..0.02));
    (x, a, y)
}
