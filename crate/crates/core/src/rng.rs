//! Seeded random streams. Every random quantity in a run derives from one
//! seed plus a fixed stream label, so components can be rebuilt independently.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Matrix, Vector};

/// Stream labels used across the crate.
pub mod stream {
    pub const VOCAB: u64 = 1;
    pub const ENCODER: u64 = 2;
    pub const DENOISER: u64 = 3;
    pub const COVARIANCE: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const TRAINING: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const SAMPLING: u64 = 8;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}
