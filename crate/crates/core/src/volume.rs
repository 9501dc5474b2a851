//! 3D volume container and the two perpendicular slice families.
//!
//! Storage is row-major with axis 1 slowest: voxel `(a, b, c)` lives at
//! `(a * d2 + b) * d3 + c`. [`SliceAxis::Axis3`] slices are the planes
//! `x[:, :, j]` (shape `(d1, d2)`), [`SliceAxis::Axis1`] slices are the
//! planes `x[j, :, :]` (shape `(d2, d3)`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Container, Payload};
use crate::error::{dim_err, Error, Result};

/// A dense 2D grid of scalars, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    shape: (usize, usize),
    data: Vec<f64>,
}

impl Slice2D {
    pub fn new(shape: (usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 {
            return dim_err(format!(
                "slice shape {:?} needs {} values, got {}",
                shape,
                shape.0 * shape.1,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.0 * shape.1],
        }
    }

    pub fn filled(shape: (usize, usize), value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.0 * shape.1],
        }
    }

    pub fn from_fn(shape: (usize, usize), mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                data.push(f(r, c));
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.1 + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape.1 + c] = v;
    }

    pub fn check_same_shape(&self, other: &Slice2D) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "slice shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Slice2D {
        Slice2D {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Slice2D) -> Slice2D {
        debug_assert_eq!(self.shape, other.shape);
        Slice2D {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Slice2D {
        self.map(|v| alpha * v)
    }

    pub fn dot(&self, other: &Slice2D) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which of the two perpendicular slice families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SliceAxis {
    /// Planes `x[:, :, j]`, `j < d3`, shape `(d1, d2)`. Primary family.
    Axis3,
    /// Planes `x[j, :, :]`, `j < d1`, shape `(d2, d3)`. Auxiliary family.
    Axis1,
}

impl fmt::Display for SliceAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceAxis::Axis3 => f.write_str("axis3"),
            SliceAxis::Axis1 => f.write_str("axis1"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if data.len() != n {
            return dim_err(format!(
                "volume shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(shape.0 * shape.1 * shape.2);
        for a in 0..shape.0 {
            for b in 0..shape.1 {
                for c in 0..shape.2 {
                    data.push(f(a, b, c));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.shape.1 + b) * self.shape.2 + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.offset(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        let o = self.offset(a, b, c);
        self.data[o] = v;
    }

    /// Number of slices in the given family.
    pub fn slice_count(&self, axis: SliceAxis) -> usize {
        match axis {
            SliceAxis::Axis3 => self.shape.2,
            SliceAxis::Axis1 => self.shape.0,
        }
    }

    pub fn slice_shape(&self, axis: SliceAxis) -> (usize, usize) {
        match axis {
            SliceAxis::Axis3 => (self.shape.0, self.shape.1),
            SliceAxis::Axis1 => (self.shape.1, self.shape.2),
        }
    }

    fn check_index(&self, axis: SliceAxis, index: usize) -> Result<()> {
        let bound = self.slice_count(axis);
        if index >= bound {
            return Err(Error::Range {
                axis: match axis {
                    SliceAxis::Axis3 => "axis3",
                    SliceAxis::Axis1 => "axis1",
                },
                index,
                bound,
            });
        }
        Ok(())
    }

    pub fn slice_extract(&self, axis: SliceAxis, index: usize) -> Result<Slice2D> {
        self.check_index(axis, index)?;
        let (d1, d2, d3) = self.shape;
        let data = match axis {
            SliceAxis::Axis3 => {
                let mut out = Vec::with_capacity(d1 * d2);
                for a in 0..d1 {
                    for b in 0..d2 {
                        out.push(self.data[(a * d2 + b) * d3 + index]);
                    }
                }
                out
            }
            SliceAxis::Axis1 => {
                let start = index * d2 * d3;
                self.data[start..start + d2 * d3].to_vec()
            }
        };
        Ok(Slice2D {
            shape: self.slice_shape(axis),
            data,
        })
    }

    /// Overwrites one plane in place.
    pub fn slice_insert_mut(&mut self, axis: SliceAxis, index: usize, s: &Slice2D) -> Result<()> {
        self.check_index(axis, index)?;
        let expected = self.slice_shape(axis);
        if s.shape != expected {
            return dim_err(format!(
                "cannot insert slice of shape {:?} along {axis}: plane shape is {:?}",
                s.shape, expected
            ));
        }
        let (d1, d2, d3) = self.shape;
        match axis {
            SliceAxis::Axis3 => {
                for a in 0..d1 {
                    for b in 0..d2 {
                        self.data[(a * d2 + b) * d3 + index] = s.data[a * d2 + b];
                    }
                }
            }
            SliceAxis::Axis1 => {
                let start = index * d2 * d3;
                self.data[start..start + d2 * d3].copy_from_slice(&s.data);
            }
        }
        Ok(())
    }

    pub fn slice_insert(&self, axis: SliceAxis, index: usize, s: &Slice2D) -> Result<Volume3D> {
        let mut out = self.clone();
        out.slice_insert_mut(axis, index, s)?;
        Ok(out)
    }

    /// All slices of one family, in index order.
    pub fn slices(&self, axis: SliceAxis) -> Vec<Slice2D> {
        (0..self.slice_count(axis))
            .map(|j| self.slice_extract(axis, j).expect("index in range"))
            .collect()
    }

    /// Rebuilds a volume from a full family of slices.
    pub fn from_slices(
        shape: (usize, usize, usize),
        axis: SliceAxis,
        slices: &[Slice2D],
    ) -> Result<Volume3D> {
        let mut vol = Volume3D::zeros(shape);
        if slices.len() != vol.slice_count(axis) {
            return dim_err(format!(
                "expected {} slices along {axis}, got {}",
                vol.slice_count(axis),
                slices.len()
            ));
        }
        for (j, s) in slices.iter().enumerate() {
            vol.slice_insert_mut(axis, j, s)?;
        }
        Ok(vol)
    }

    /// Affine rescale onto `[0, 1]`. Constant volumes map to zeros.
    pub fn normalize(&self) -> Volume3D {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            self.data
                .iter()
                .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume3D {
            shape: self.shape,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serialises to the `TPDMVOL1` container (f32 payload).
    pub fn to_bytes(&self) -> Vec<u8> {
        Container {
            shape: [self.shape.0, self.shape.1, self.shape.2],
            payload: Payload::F32(self.data.iter().map(|&v| v as f32).collect()),
        }
        .encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume3D> {
        let c = Container::decode(bytes)?;
        let [d1, d2, d3] = c.shape;
        match c.payload {
            Payload::F32(v) => Ok(Volume3D {
                shape: (d1, d2, d3),
                data: v.into_iter().map(f64::from).collect(),
            }),
            Payload::C64(_) => Err(Error::CorruptFile(
                "expected a real (f32) volume, found c64 payload".into(),
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Volume3D> {
        Volume3D::from_bytes(&std::fs::read(path)?)
    }
}
