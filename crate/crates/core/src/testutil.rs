use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{PointPattern, Window};

/// Uniform points on the unit square with covariates `(1, u − ½)` and marks
/// `1 + w₁ + noise`.
pub fn random_pattern(n: usize, seed: u64) -> PointPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let cov: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random::<f64>() - 0.5]).collect();
    let marks = (0..n).map(|i| 1.0 + cov[i][1] + rng.random::<f64>()).collect();
    PointPattern::new(Window::square(1.0), locs, marks, cov).unwrap()
}
