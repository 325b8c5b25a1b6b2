//! Voxel grids and binary masks.
//!
//! Linear order is x-fastest (`index = x + nx * (y + ny * z)`), the NIfTI
//! voxel order. Values are `f32`; reductions accumulate in `f64`.

mod io;

use std::path::PathBuf;

use thiserror::Error;

pub use io::{read_volume, write_volume};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f32; 3]),
    #[error("data length {actual} does not match dims {dims:?} ({expected} voxels)")]
    SizeMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at linear index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed header in {}: {reason}", path.display())]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("unsupported NIfTI datatype code {0} (accepted: 2 uint8, 4 int16, 16 float32)")]
    UnsupportedDatatype(i16),
    #[error("cannot write {}: only the raw .vvol format is writable", .0.display())]
    UnsupportedWrite(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(VolumeError::InvalidDims(dims))
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolumeError::InvalidSpacing(spacing))
    }
}

/// A 3D scalar grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let expected = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != expected {
            return Err(VolumeError::SizeMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        Volume::new(dims, spacing, vec![value; n])
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Volume::filled(dims, spacing, 0.0)
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, data)
    }

    /// Same grid, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, self.spacing, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(VolumeError::DimsMismatch {
                left: self.dims,
                right: other.dims,
            })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// One boolean per voxel, on the same grid as the volumes it selects from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        let expected = check_dims(dims)?;
        if bits.len() != expected {
            return Err(VolumeError::SizeMismatch {
                dims,
                expected,
                actual: bits.len(),
            });
        }
        Ok(Mask { dims, bits })
    }

    /// Every non-zero voxel of `v` is selected.
    pub fn from_nonzero(v: &Volume) -> Self {
        Mask {
            dims: v.dims,
            bits: v.data.iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear indices of the selected voxels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn check_applies_to(&self, v: &Volume) -> Result<()> {
        if self.dims == v.dims {
            Ok(())
        } else {
            Err(VolumeError::DimsMismatch {
                left: self.dims,
                right: v.dims,
            })
        }
    }

    /// 0/1 volume for writing to disk.
    pub fn to_volume(&self, spacing: [f32; 3]) -> Result<Volume> {
        Volume::new(
            self.dims,
            spacing,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Selects voxels with value strictly greater than `tau`.
pub fn threshold_mask(v: &Volume, tau: f32) -> Mask {
    debug_assert!(tau.is_finite());
    Mask {
        dims: v.dims,
        bits: v.data.iter().map(|&x| x > tau).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constructor_enforces_invariants() {
        assert!(matches!(
            Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]),
            Err(VolumeError::SizeMismatch {
                expected: 8,
                actual: 7,
                ..
            })
        ));
        assert!(matches!(
            Volume::new([0, 2, 2], [1.0; 3], vec![]),
            Err(VolumeError::InvalidDims(_))
        ));
        assert!(matches!(
            Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]),
            Err(VolumeError::InvalidSpacing(_))
        ));
        assert!(matches!(
            Volume::new([1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]),
            Err(VolumeError::NonFinite(1))
        ));
    }

    #[test]
    fn x_fastest_order() {
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        assert_eq!(&v.data()[..4], &[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(v.get(2, 1, 1), 112.0);
        assert_eq!(v.index(2, 1, 1), 11);
    }

    #[test]
    fn threshold_basic() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 0.3, 0.0]).unwrap();
        assert_eq!(threshold_mask(&v, 0.0).bits(), &[false, true, false]);
        let (_, max) = v.min_max();
        assert_eq!(threshold_mask(&v, max).count(), 0);
    }

    #[test]
    fn threshold_matches_scalar_count() {
        let data: Vec<f32> = (0..60).map(|i| ((i * 37) % 23) as f32 / 23.0 - 0.2).collect();
        let v = Volume::new([5, 4, 3], [1.0; 3], data.clone()).unwrap();
        let mut expected = 0;
        for &x in &data {
            if x > 0.1 {
                expected += 1;
            }
        }
        assert_eq!(threshold_mask(&v, 0.1).count(), expected);
    }

    proptest! {
        #[test]
        fn threshold_count_monotone(
            data in proptest::collection::vec(-1.0f32..1.0, 27),
            t1 in -1.0f32..1.0,
            dt in 0.0f32..1.0,
        ) {
            let v = Volume::new([3, 3, 3], [1.0; 3], data).unwrap();
            prop_assert!(threshold_mask(&v, t1 + dt).count() <= threshold_mask(&v, t1).count());
        }
    }
}
