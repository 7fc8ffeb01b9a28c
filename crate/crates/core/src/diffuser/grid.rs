use rand::Rng;

use crate::error::{ensure, Result};
use crate::rng::normal_matrix;
use crate::Matrix;

/// `H × W × d_f` feature map stored as a `(H·W) × d_f` matrix, pixel-major
/// (`row = y·W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    data: Matrix,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self> {
        ensure(height > 0 && width > 0, || "feature grid must be nonempty".into())?;
        ensure(data.nrows() == height * width, || {
            format!("grid {height}x{width} needs {} rows, data has {}", height * width, data.nrows())
        })?;
        ensure(data.ncols() > 0, || "feature grid needs at least one channel".into())?;
        ensure(data.iter().all(|v| v.is_finite()), || "feature grid contains non-finite values".into())?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: Matrix::zeros(height * width, channels),
        }
    }

    /// Standard normal entries.
    pub fn random<R: Rng>(rng: &mut R, height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: normal_matrix(rng, height * width, channels, 1.0),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels() == other.channels()
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        ensure(self.same_shape(other), || {
            format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.channels(),
                other.height,
                other.width,
                other.channels()
            )
        })
    }
}
