//! 2-D grayscale image tensor with a declared value range.
//!
//! Dataset-facing images live in [0, 1]; everything handed to a model lives
//! in [-1, 1]. The conversion between the two is an explicit, invertible
//! affine map applied at the data boundary, never implicitly inside math ops.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value interval of an image tensor.
///
/// Noisy intermediates produced by the forward process routinely leave the
/// declared interval; the declaration records intent at data boundaries, it
/// is not clamped per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    /// Dataset range [0, 1].
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    /// Model range [-1, 1].
    pub const SYMMETRIC: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
}

/// A single-channel image with real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array2<f64>,
    value_range: ValueRange,
}

impl ImageTensor {
    /// Wraps a 2-D array, rejecting non-finite entries.
    pub fn new(data: Array2<f64>, value_range: ValueRange) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite entries".into()));
        }
        Ok(ImageTensor { data, value_range })
    }

    /// Wraps without the finiteness scan. For internal hot paths where the
    /// producer already guarantees finite values.
    pub fn from_parts(data: Array2<f64>, value_range: ValueRange) -> Self {
        ImageTensor { data, value_range }
    }

    pub fn zeros(height: usize, width: usize, value_range: ValueRange) -> Self {
        ImageTensor {
            data: Array2::zeros((height, width)),
            value_range,
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// [0,1] -> [-1,1], the map applied when data enters a model.
    pub fn to_model_range(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| 2.0 * v - 1.0),
            value_range: ValueRange::SYMMETRIC,
        }
    }

    /// [-1,1] -> [0,1], the inverse map applied when data leaves a model.
    pub fn to_unit_range(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| (v + 1.0) / 2.0),
            value_range: ValueRange::UNIT,
        }
    }
}
