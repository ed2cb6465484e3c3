use nalgebra::Point2;

use crate::error::{shape, Result};
use crate::numerics::Tensor;

/// Stride of the coarse (1/8) patch grid in full-resolution pixels.
pub const COARSE_STRIDE: usize = 8;
/// Stride of the fine (1/2) grid in full-resolution pixels.
pub const FINE_STRIDE: usize = 2;

/// Dense `H×W×C` feature map sampled on a regular grid of `stride` pixels.
///
/// Cell `(row, col)` has flat index `row * W + col` and its centre sits at
/// full-resolution pixel `((col + 0.5)·stride, (row + 0.5)·stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Tensor,
    stride: usize,
}

impl FeatureGrid {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(shape(format!("feature grid must be H×W×C, got {:?}", data.shape())));
        }
        if stride == 0 {
            return Err(shape("stride must be positive"));
        }
        Ok(Self { data, stride })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature(&self, index: usize) -> &[f32] {
        self.data.row(index)
    }

    /// Flattened `(H·W)×C` view.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.channels()], self.data.data().to_vec())
            .expect("same element count")
    }

    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.stride)
    }

    pub fn from_matrix(m: Tensor, height: usize, width: usize, stride: usize) -> Result<Self> {
        let c = m.row_len();
        Self::new(m.reshape(&[height, width, c])?, stride)
    }

    /// Full-resolution pixel at the centre of cell `index`.
    pub fn cell_center(&self, index: usize) -> Point2<f64> {
        let (row, col) = (index / self.width(), index % self.width());
        Point2::new(
            (col as f64 + 0.5) * self.stride as f64,
            (row as f64 + 0.5) * self.stride as f64,
        )
    }

    /// Texel coordinates of a full-resolution pixel position.
    pub fn to_texel(&self, p: &Point2<f64>) -> (f64, f64) {
        let s = self.stride as f64;
        (p.x / s - 0.5, p.y / s - 0.5)
    }

    pub fn to_pixel(&self, texel: (f64, f64)) -> Point2<f64> {
        let s = self.stride as f64;
        Point2::new((texel.0 + 0.5) * s, (texel.1 + 0.5) * s)
    }

    /// Cell containing pixel `p` (floor bucketing); `None` outside the grid.
    pub fn cell_of(&self, p: &Point2<f64>) -> Option<usize> {
        cell_index(p, self.stride, self.width(), self.height())
    }
}

/// Floor-bucket a pixel into a `width×height` grid of `stride`-pixel cells.
/// Cell `k` owns `[k·stride, (k+1)·stride)`.
pub fn cell_index(p: &Point2<f64>, stride: usize, width: usize, height: usize) -> Option<usize> {
    if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
        return None;
    }
    let col = (p.x / stride as f64).floor() as usize;
    let row = (p.y / stride as f64).floor() as usize;
    (col < width && row < height).then_some(row * width + col)
}
