use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One spatial feature map, stored flattened as `(height * width) x channels`
/// with row-major position order (`y * width + x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVolume {
    height: usize,
    width: usize,
    data: Array2<f64>,
}

impl FeatureVolume {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.ncols() == 0 {
            return Err(Error::shape("feature volume must be non-empty"));
        }
        if data.nrows() != height * width {
            return Err(Error::shape(format!(
                "feature volume {height}x{width} needs {} rows, got {}",
                height * width,
                data.nrows()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let data = Array2::from_shape_fn((height * width, channels), |(p, c)| {
            f(p / width, p % width, c)
        });
        Self {
            height,
            width,
            data,
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

    pub fn positions(&self) -> usize {
        self.data.nrows()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub(crate) fn matrix_mut(&mut self) -> ndarray::ArrayViewMut2<'_, f64> {
        self.data.view_mut()
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.row(y * self.width + x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
