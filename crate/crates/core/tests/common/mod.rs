#![allow(dead_code)]

use klr_core::{MetricSpace, Matrix, Vector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vector<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A covariance estimated from random samples, like the one a real encoder
/// would produce.
pub fn metric<R: Rng>(rng: &mut R, n: usize) -> MetricSpace {
    let samples: Vec<Vector> = (0..4 * n).map(|_| vector(rng, n)).collect();
    klr_core::estimate_covariance(&samples, 1e-3).unwrap()
}

pub fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}
