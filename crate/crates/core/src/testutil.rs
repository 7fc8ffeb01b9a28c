use rand::Rng;
use rand_distr::StandardNormal;

use crate::metric::MetricSpace;
use crate::{Matrix, Vector};

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// SPD metric `C⁻¹ = A Aᵀ/n + 0.1 I` with a well-separated spectrum.
pub fn random_metric<R: Rng>(rng: &mut R, n: usize) -> MetricSpace {
    let a = random_matrix(rng, n, n);
    let c_inv = &a * a.transpose() / n as f64 + Matrix::identity(n, n) * 0.1;
    MetricSpace::from_inverse(c_inv).unwrap()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
