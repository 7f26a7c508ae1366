//! Orientation-indexed slicing (division block) and reassembly
//! (concatenation block).
//!
//! Axis convention for a `[c, d0, d1, d2]` volume:
//!
//! | orientation | slice axis | slice shape  |
//! |-------------|------------|--------------|
//! | axial       | d2         | `(d0, d1)`   |
//! | coronal     | d0         | `(d1, d2)`   |
//! | sagittal    | d1         | `(d2, d0)`   |
//!
//! Sagittal slices are transposed so a `(192, 160, 160)` volume yields
//! `(192,160)`, `(160,160)` and `(160,192)` cross-sections.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::volume::{Sample, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Spatial axis (0-based over d0..d2) that indexes the cross-sections.
    pub fn slice_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 0,
            Orientation::Sagittal => 1,
        }
    }

    pub fn in_plane_transpose(self) -> bool {
        matches!(self, Orientation::Sagittal)
    }

    pub fn tag(self) -> char {
        match self {
            Orientation::Axial => 'A',
            Orientation::Coronal => 'C',
            Orientation::Sagittal => 'S',
        }
    }

    pub fn from_tag(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'A' => Ok(Orientation::Axial),
            'C' => Ok(Orientation::Coronal),
            'S' => Ok(Orientation::Sagittal),
            other => Err(Error::Config(format!("unknown orientation tag `{other}`"))),
        }
    }

    /// Spatial shape of one cross-section for a volume of spatial shape `dims`.
    pub fn slice_shape(self, dims: [usize; 3]) -> (usize, usize) {
        let (a, b) = in_plane_axes(self.slice_axis());
        if self.in_plane_transpose() {
            (dims[b], dims[a])
        } else {
            (dims[a], dims[b])
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Orientation::from_tag(c),
            _ => match s.trim().to_ascii_lowercase().as_str() {
                "axial" => Ok(Orientation::Axial),
                "coronal" => Ok(Orientation::Coronal),
                "sagittal" => Ok(Orientation::Sagittal),
                _ => Err(Error::Config(format!("unknown orientation `{s}`"))),
            },
        }
    }
}

fn in_plane_axes(slice_axis: usize) -> (usize, usize) {
    match slice_axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// A permutation of the three orientations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProgressionOrder([Orientation; 3]);

impl ProgressionOrder {
    pub fn new(sequence: [Orientation; 3]) -> Result<Self> {
        let [a, b, c] = sequence;
        if a == b || b == c || a == c {
            return Err(Error::Config(format!(
                "progression order must use each orientation once, got {}{}{}",
                a, b, c
            )));
        }
        Ok(ProgressionOrder(sequence))
    }

    pub fn sequence(&self) -> [Orientation; 3] {
        self.0
    }

    /// Orientation of stage `n` (1-based).
    pub fn stage(&self, n: usize) -> Orientation {
        self.0[n - 1]
    }

    pub fn code(&self) -> String {
        self.0.iter().map(|o| o.tag()).collect()
    }
}

impl fmt::Display for ProgressionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a} → {b} → {c}")
    }
}

impl FromStr for ProgressionOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let tags: Vec<char> = s
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .collect();
        if tags.len() != 3 {
            return Err(Error::Config(format!("progression order `{s}` must name 3 orientations")));
        }
        ProgressionOrder::new([
            Orientation::from_tag(tags[0])?,
            Orientation::from_tag(tags[1])?,
            Orientation::from_tag(tags[2])?,
        ])
    }
}

impl Serialize for ProgressionOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for ProgressionOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All six progression orders, lexicographic by tag (A < C < S).
pub fn enumerate_orders() -> Vec<ProgressionOrder> {
    use Orientation::*;
    let mut out = Vec::with_capacity(6);
    for a in [Axial, Coronal, Sagittal] {
        for b in [Axial, Coronal, Sagittal] {
            for c in [Axial, Coronal, Sagittal] {
                if let Ok(order) = ProgressionOrder::new([a, b, c]) {
                    out.push(order);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack<T = f32> {
    /// `[channels, h, w]` cross-sections in slice-axis order.
    pub slices: Vec<Array3<T>>,
    pub orientation: Orientation,
    pub origin_shape: [usize; 3],
    pub spacing: [f32; 3],
    pub value_range: (f32, f32),
}

impl<T: Sample> SliceStack<T> {
    /// Stack of freshly generated slices; spacing defaults to 1 mm and the
    /// value range is recomputed on reassembly.
    pub fn new(slices: Vec<Array3<T>>, orientation: Orientation, origin_shape: [usize; 3]) -> Self {
        SliceStack {
            slices,
            orientation,
            origin_shape,
            spacing: [1.0; 3],
            value_range: (f32::NAN, f32::NAN),
        }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// `n_c` consecutive slices centred on `index`, stacked along channels.
    /// Out-of-range neighbours replicate the edge slice.
    pub fn neighborhood(&self, index: usize, n_c: usize) -> Result<Array3<T>> {
        check_neighborhood_args(index, self.len(), n_c)?;
        let half = (n_c / 2) as isize;
        let last = self.len() as isize - 1;
        let views: Vec<ArrayView3<T>> = (-half..=half)
            .map(|off| {
                let j = (index as isize + off).clamp(0, last) as usize;
                self.slices[j].view()
            })
            .collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
    }
}

fn check_neighborhood_args(index: usize, count: usize, n_c: usize) -> Result<()> {
    if n_c % 2 == 0 {
        return Err(Error::Config(format!("n_c must be odd, got {n_c}")));
    }
    if index >= count {
        return Err(Error::Range(format!("slice index {index} outside 0..{count}")));
    }
    Ok(())
}

fn slice_view<T>(data: &Array4<T>, o: Orientation, i: usize) -> ArrayView3<'_, T> {
    let view = data.index_axis(Axis(o.slice_axis() + 1), i);
    if o.in_plane_transpose() {
        view.permuted_axes([0, 2, 1])
    } else {
        view
    }
}

/// Division block: every cross-section of `vol` along `o`.
pub fn split_volume<T: Sample>(vol: &Volume<T>, o: Orientation) -> SliceStack<T> {
    let count = vol.dims()[o.slice_axis()];
    let slices = (0..count)
        .map(|i| slice_view(&vol.data, o, i).as_standard_layout().into_owned())
        .collect();
    SliceStack {
        slices,
        orientation: o,
        origin_shape: vol.dims(),
        spacing: vol.spacing,
        value_range: vol.value_range,
    }
}

/// Concatenation block: inverse of [`split_volume`].
pub fn stack_to_volume<T: Sample>(stack: &SliceStack<T>) -> Result<Volume<T>> {
    let o = stack.orientation;
    let axis = o.slice_axis();
    if stack.len() != stack.origin_shape[axis] {
        return Err(Error::MalformedStack(format!(
            "{} slices for an axis of length {}",
            stack.len(),
            stack.origin_shape[axis]
        )));
    }
    let first = stack
        .slices
        .first()
        .ok_or_else(|| Error::MalformedStack("empty stack".into()))?;
    let channels = first.shape()[0];
    let (h, w) = o.slice_shape(stack.origin_shape);
    for (i, s) in stack.slices.iter().enumerate() {
        if s.shape() != [channels, h, w] {
            return Err(Error::MalformedStack(format!(
                "slice {i} has shape {:?}, expected {:?}",
                s.shape(),
                [channels, h, w]
            )));
        }
    }
    let [d0, d1, d2] = stack.origin_shape;
    let mut data = Array4::<T>::default((channels, d0, d1, d2));
    for (i, s) in stack.slices.iter().enumerate() {
        let mut target = data.index_axis_mut(Axis(axis + 1), i);
        if o.in_plane_transpose() {
            target.assign(&s.view().permuted_axes([0, 2, 1]));
        } else {
            target.assign(s);
        }
    }
    let mut vol = Volume::new(data)?.with_spacing(stack.spacing);
    if stack.value_range.0.is_nan() || stack.value_range.1.is_nan() {
        vol.refresh_range();
    } else {
        vol.value_range = stack.value_range;
    }
    Ok(vol)
}

/// `n_c` consecutive cross-sections along `o` centred at `index`, stacked on
/// the channel axis (neighbour-major). Edges replicate.
pub fn extract_neighborhood<T: Sample>(
    vol: &Volume<T>,
    o: Orientation,
    index: usize,
    n_c: usize,
) -> Result<Array3<T>> {
    let count = vol.dims()[o.slice_axis()];
    check_neighborhood_args(index, count, n_c)?;
    let half = (n_c / 2) as isize;
    let views: Vec<ArrayView3<T>> = (-half..=half)
        .map(|off| {
            let j = (index as isize + off).clamp(0, count as isize - 1) as usize;
            slice_view(&vol.data, o, j)
        })
        .collect();
    let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(out.as_standard_layout().into_owned())
}
