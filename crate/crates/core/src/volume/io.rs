//! File formats.
//!
//! Raw: `<name>.vvol` holds little-endian `f32` voxels in x-fastest order and
//! `<name>.vvol.json` holds `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz]}`.
//!
//! NIfTI-1 (read only): single-file, uncompressed `.nii` with datatype
//! uint8 (2), int16 (4) or float32 (16). Spacing comes from `pixdim[1..=3]`;
//! orientation is ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, Volume, VolumeError};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f32; 3],
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_nifti(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            VolumeError::MissingFile(path.to_path_buf())
        } else {
            VolumeError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a `.vvol` (with sidecar) or an uncompressed `.nii` file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw(path)
    }
}

/// Writes `v` as `.vvol` plus its JSON sidecar, replacing existing files.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_nifti(path) {
        return Err(VolumeError::UnsupportedWrite(path.to_path_buf()));
    }
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let header = Sidecar {
        dims: v.dims(),
        spacing: v.spacing(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_vec(&header).expect("sidecar serializes");
    fs::write(&side, json).map_err(io_err(&side))?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let header_bytes = fs::read(&side).map_err(io_err(&side))?;
    let header: Sidecar = serde_json::from_slice(&header_bytes).map_err(|e| malformed(&side, e.to_string()))?;
    let payload = fs::read(path).map_err(io_err(path))?;
    let expected = header
        .dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| malformed(&side, "dims overflow"))?;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(VolumeError::SizeMismatch {
            dims: header.dims,
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, data)
}

const NIFTI_HEADER_SIZE: usize = 348;

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.little {
            i32::from_le_bytes(b)
        } else {
            i32::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(malformed(
            path,
            format!("file is {} bytes, shorter than the 348-byte header", bytes.len()),
        ));
    }
    let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let little = match (le, be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(malformed(path, format!("sizeof_hdr is {le}, expected 348"))),
    };
    let r = Reader { bytes: &bytes, little };
    if &bytes[344..348] != b"n+1\0" {
        return Err(malformed(
            path,
            "magic is not \"n+1\" (only single-file NIfTI-1 is supported)",
        ));
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(path, format!("dim[0] = {ndim} out of range 1..=7")));
    }
    let mut dims = [1usize; 3];
    for axis in 1..=ndim as usize {
        let d = r.i16(40 + 2 * axis);
        if d < 1 {
            return Err(malformed(path, format!("dim[{axis}] = {d}")));
        }
        if axis <= 3 {
            dims[axis - 1] = d as usize;
        } else if d != 1 {
            return Err(malformed(
                path,
                format!("dim[{axis}] = {d}: only 3D volumes are supported"),
            ));
        }
    }

    let datatype = r.i16(70);
    let bytes_per_voxel = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };
    let bitpix = r.i16(72);
    if bitpix as usize != bytes_per_voxel * 8 {
        return Err(malformed(
            path,
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut spacing = [1.0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let p = r.f32(76 + 4 * (axis + 1)).abs();
        if !(p.is_finite() && p > 0.0) {
            return Err(malformed(path, format!("pixdim[{}] = {p}", axis + 1)));
        }
        *s = p;
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_SIZE as f32) {
        return Err(malformed(path, format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let available = bytes.len().saturating_sub(start) / bytes_per_voxel;
    if available < n {
        return Err(VolumeError::SizeMismatch {
            dims,
            expected: n,
            actual: available,
        });
    }
    let payload = &bytes[start..start + n * bytes_per_voxel];
    let mut data: Vec<f32> = match datatype {
        2 => payload.iter().map(|&b| f32::from(b)).collect(),
        4 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f32::from(if little {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                })
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect(),
    };

    let slope = r.f32(112);
    let inter = r.f32(116);
    if slope.is_finite() && slope != 0.0 && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume::new(dims, spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_name_appends_json() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/sub-0_img.vvol")),
            PathBuf::from("/tmp/sub-0_img.vvol.json")
        );
    }

    #[test]
    fn nifti_write_is_rejected() {
        let v = Volume::zeros([1, 1, 1], [1.0; 3]).unwrap();
        assert!(matches!(
            write_volume(&v, "x.nii"),
            Err(VolumeError::UnsupportedWrite(_))
        ));
    }
}
