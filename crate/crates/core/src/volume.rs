//! The volumetric payload: a `[channels, d0, d1, d2]` grid plus spacing and
//! intensity-range metadata.

use ndarray::{Array3, Array4, Axis};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Real,
    Complex,
}

/// Voxel sample type. Implemented for `f32` and `Complex32`.
pub trait Sample: Copy + Clone + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: DType;
    fn magnitude(self) -> f32;
    fn to_complex(self) -> Complex32;
}

impl Sample for f32 {
    const DTYPE: DType = DType::Real;
    fn magnitude(self) -> f32 {
        self.abs()
    }
    fn to_complex(self) -> Complex32 {
        Complex32::new(self, 0.0)
    }
}

impl Sample for Complex32 {
    const DTYPE: DType = DType::Complex;
    fn magnitude(self) -> f32 {
        self.norm()
    }
    fn to_complex(self) -> Complex32 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    pub data: Array4<T>,
    /// Voxel size in mm along d0, d1, d2.
    pub spacing: [f32; 3],
    /// Declared intensity range. For complex volumes this bounds magnitudes.
    pub value_range: (f32, f32),
}

impl<T: Sample> Volume<T> {
    /// Wraps `data` with unit spacing and a value range computed from the data.
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "volume dims must be >= 1, got {:?}",
                data.shape()
            )));
        }
        let value_range = data_range(&data);
        Ok(Volume {
            data,
            spacing: [1.0; 3],
            value_range,
        })
    }

    /// Single-channel volume from a rank-3 grid.
    pub fn from_grid(grid: Array3<T>) -> Result<Self> {
        Self::new(grid.insert_axis(Axis(0)))
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_value_range(mut self, range: (f32, f32)) -> Self {
        self.value_range = range;
        self
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial shape `(d0, d1, d2)`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Recomputes `value_range` from the data.
    pub fn refresh_range(&mut self) {
        self.value_range = data_range(&self.data);
    }

    /// Channel 0 as a rank-3 grid.
    pub fn grid(&self) -> Array3<T> {
        self.data.index_axis(Axis(0), 0).to_owned()
    }

    pub fn magnitude(&self) -> Volume<f32> {
        let data = self.data.mapv(|v| v.magnitude());
        let value_range = (0.0, data.iter().cloned().fold(0.0f32, f32::max));
        Volume {
            data,
            spacing: self.spacing,
            value_range,
        }
    }

    pub fn to_complex(&self) -> Volume<Complex32> {
        let data = self.data.mapv(|v| v.to_complex());
        Volume {
            data,
            spacing: self.spacing,
            value_range: (0.0, self.magnitude().value_range.1),
        }
    }

    pub(crate) fn expect_same_shape<U: Sample>(&self, other: &Volume<U>, what: &str) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(())
    }
}

impl Volume<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        data_range(&self.data)
    }

    /// Stacks single- or multi-channel volumes along the channel axis.
    pub fn concat_channels(parts: &[&Volume<f32>]) -> Result<Volume<f32>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("no volumes to concatenate".into()))?;
        if let Some(p) = parts.iter().find(|p| p.dims() != first.dims()) {
            return Err(Error::Dimension(format!(
                "channel concat: spatial dims {:?} and {:?} differ",
                p.dims(),
                first.dims()
            )));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut v = Volume::new(data)?.with_spacing(first.spacing);
        v.refresh_range();
        Ok(v)
    }
}

fn data_range<T: Sample>(data: &Array4<T>) -> (f32, f32) {
    match T::DTYPE {
        DType::Complex => (0.0, data.iter().map(|v| v.magnitude()).fold(0.0f32, f32::max)),
        DType::Real => {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for v in data.iter() {
                let x = v.to_complex().re;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            (lo, hi)
        }
    }
}
