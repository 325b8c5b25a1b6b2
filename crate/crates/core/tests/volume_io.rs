use std::fs;
use std::path::Path;

use proptest::prelude::*;
use uqcat_core::volume::{read_volume, threshold_mask, write_volume, Volume, VolumeError};

/// Minimal NIfTI-1 writer used only to exercise the reader.
struct Nifti {
    dims: Vec<i16>,
    pixdim: [f32; 3],
    datatype: i16,
    bitpix: i16,
    payload: Vec<u8>,
    slope: f32,
    inter: f32,
    big_endian: bool,
    magic: [u8; 4],
}

impl Nifti {
    fn float32(dims: [i16; 3], values: &[f32]) -> Self {
        Nifti {
            dims: dims.to_vec(),
            pixdim: [1.0; 3],
            datatype: 16,
            bitpix: 32,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            slope: 0.0,
            inter: 0.0,
            big_endian: false,
            magic: *b"n+1\0",
        }
    }

    fn bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let be = self.big_endian;
        let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| {
            let b = if be { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 2].copy_from_slice(&b);
        };
        let put_i32 = |h: &mut Vec<u8>, off: usize, v: i32| {
            let b = if be { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 4].copy_from_slice(&b);
        };
        let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| put_i32(h, off, v.to_bits() as i32);
        put_i32(&mut h, 0, 348);
        put_i16(&mut h, 40, self.dims.len() as i16);
        for (i, &d) in self.dims.iter().enumerate() {
            put_i16(&mut h, 42 + 2 * i, d);
        }
        put_i16(&mut h, 70, self.datatype);
        put_i16(&mut h, 72, self.bitpix);
        put_f32(&mut h, 76, 1.0);
        for (i, &p) in self.pixdim.iter().enumerate() {
            put_f32(&mut h, 80 + 4 * i, p);
        }
        put_f32(&mut h, 108, 352.0);
        put_f32(&mut h, 112, self.slope);
        put_f32(&mut h, 116, self.inter);
        h[344..348].copy_from_slice(&self.magic);
        h.extend_from_slice(&self.payload);
        h
    }

    fn write(&self, path: &Path) {
        fs::write(path, self.bytes()).unwrap();
    }
}

#[test]
fn raw_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ones.vvol");
    let payload: Vec<u8> = (0..8).flat_map(|_| 1.0f32.to_le_bytes()).collect();
    fs::write(&path, payload).unwrap();
    fs::write(
        dir.path().join("ones.vvol.json"),
        r#"{"dims":[2,2,2],"spacing":[1,1,1]}"#,
    )
    .unwrap();
    let v = read_volume(&path).unwrap();
    assert_eq!(v.dims(), [2, 2, 2]);
    assert_eq!(v.spacing(), [1.0; 3]);
    assert_eq!(v.data(), &[1.0; 8]);
}

#[test]
fn payload_shorter_than_header_claims() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.vvol");
    fs::write(&path, vec![0u8; 32 * 4]).unwrap();
    fs::write(
        dir.path().join("short.vvol.json"),
        r#"{"dims":[4,4,4],"spacing":[1,1,1]}"#,
    )
    .unwrap();
    match read_volume(&path) {
        Err(VolumeError::SizeMismatch { dims, expected, actual }) => {
            assert_eq!((dims, expected, actual), ([4, 4, 4], 64, 32));
        }
        other => panic!("expected size mismatch, got {other:?}"),
    }
}

#[test]
fn spacing_is_recorded_exactly_and_overwrite_replaces() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vvol");
    let a = Volume::from_fn([3, 2, 2], [1.0, 1.0, 2.5], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
    write_volume(&a, &path).unwrap();
    let header: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("v.vvol.json")).unwrap()).unwrap();
    assert_eq!(header["spacing"], serde_json::json!([1.0, 1.0, 2.5]));
    assert_eq!(header["dims"], serde_json::json!([3, 2, 2]));

    let b = Volume::filled([2, 2, 1], [0.5; 3], -3.0).unwrap();
    write_volume(&b, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), b);
}

#[test]
fn distinct_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_volume(dir.path().join("absent.vvol")),
        Err(VolumeError::MissingFile(_))
    ));
    assert!(matches!(
        read_volume(dir.path().join("absent.nii")),
        Err(VolumeError::MissingFile(_))
    ));

    let path = dir.path().join("bad.vvol");
    fs::write(&path, [0u8; 4]).unwrap();
    fs::write(dir.path().join("bad.vvol.json"), "{\"dims\": [1,1]}").unwrap();
    assert!(matches!(read_volume(&path), Err(VolumeError::MalformedHeader { .. })));

    let nii = dir.path().join("f64.nii");
    let mut n = Nifti::float32([1, 1, 1], &[0.0]);
    n.datatype = 64;
    n.bitpix = 64;
    n.payload = vec![0; 8];
    n.write(&nii);
    assert!(matches!(read_volume(&nii), Err(VolumeError::UnsupportedDatatype(64))));

    let mut n = Nifti::float32([1, 1, 1], &[0.0]);
    n.magic = *b"ni1\0";
    n.write(&nii);
    assert!(matches!(read_volume(&nii), Err(VolumeError::MalformedHeader { .. })));

    Nifti::float32([2, 2, 2], &[0.0; 4]).write(&nii);
    assert!(matches!(
        read_volume(&nii),
        Err(VolumeError::SizeMismatch {
            expected: 8,
            actual: 4,
            ..
        })
    ));

    let path = dir.path().join("nan.vvol");
    fs::write(&path, f32::NAN.to_le_bytes()).unwrap();
    fs::write(
        dir.path().join("nan.vvol.json"),
        r#"{"dims":[1,1,1],"spacing":[1,1,1]}"#,
    )
    .unwrap();
    assert!(matches!(read_volume(&path), Err(VolumeError::NonFinite(0))));
}

#[test]
fn nifti_float32_in_x_fastest_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.nii");
    let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
    let mut n = Nifti::float32([4, 3, 2], &values);
    n.pixdim = [0.9, 1.1, 3.0];
    n.write(&path);
    let v = read_volume(&path).unwrap();
    assert_eq!(v.dims(), [4, 3, 2]);
    assert_eq!(v.spacing(), [0.9, 1.1, 3.0]);
    assert_eq!(v.get(1, 2, 1), values[1 + 4 * 2 + 12]);
    assert_eq!(v.data(), values.as_slice());
}

#[test]
fn nifti_integer_types_promote_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lab.nii");
    let mut n = Nifti::float32([3, 1, 1], &[0.0; 3]);
    n.datatype = 2;
    n.bitpix = 8;
    n.payload = vec![0, 1, 255];
    n.write(&path);
    assert_eq!(read_volume(&path).unwrap().data(), &[0.0, 1.0, 255.0]);

    let mut n = Nifti::float32([2, 1, 1], &[0.0; 2]);
    n.datatype = 4;
    n.bitpix = 16;
    n.big_endian = true;
    n.payload = [-300i16, 7].iter().flat_map(|v| v.to_be_bytes()).collect();
    n.slope = 2.0;
    n.inter = 1.0;
    n.write(&path);
    assert_eq!(read_volume(&path).unwrap().data(), &[-599.0, 15.0]);
}

#[test]
fn nifti_cannot_be_written() {
    let v = Volume::zeros([1, 1, 1], [1.0; 3]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        write_volume(&v, dir.path().join("x.nii")),
        Err(VolumeError::UnsupportedWrite(_))
    ));
}

#[test]
fn threshold_examples() {
    let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 0.3, 0.0]).unwrap();
    assert_eq!(threshold_mask(&v, 0.0).bits(), &[false, true, false]);
    let (_, max) = v.min_max();
    assert_eq!(threshold_mask(&v, max).count(), 0);
}

fn volumes() -> impl Strategy<Value = Volume> {
    (
        1usize..=16,
        1usize..=16,
        1usize..=16,
        0.1f32..5.0,
        0.1f32..5.0,
        0.1f32..5.0,
    )
        .prop_flat_map(|(nx, ny, nz, sx, sy, sz)| {
            proptest::collection::vec(-1e6f32..1e6, nx * ny * nz)
                .prop_map(move |data| Volume::new([nx, ny, nz], [sx, sy, sz], data).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_round_trip_is_bit_exact(v in volumes()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.vvol");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        let same_bits = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
    }
}
