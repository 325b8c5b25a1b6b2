//! Affine resampling about the grid centre.
//!
//! Forward mapping in millimetres, with `c` the grid centre:
//! `T(x) = c + t + S * R * (x - c)`, `R = Rz * Ry * Rx`. The output at `y`
//! is the trilinear interpolation of the input at `T^-1(y)`, so a positive
//! translation moves content toward the positive axis direction. Samples
//! that fall outside the grid are 0.

use serde::{Deserialize, Serialize};

use super::{AugmentError, Result};
use crate::volume::Volume;

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: [f32; 3],
    /// Rotation about the x, y and z axes in degrees.
    pub rotation_deg: [f32; 3],
    pub translation_mm: [f32; 3],
    /// When set, these parameters denote the inverse of the mapping they
    /// would otherwise describe. Needed because `(S R)^-1 = R^T S^-1` has no
    /// scale-after-rotation form once the scale is anisotropic.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inverse: bool,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            scale: [1.0; 3],
            rotation_deg: [0.0; 3],
            translation_mm: [0.0; 3],
            inverse: false,
        }
    }

    pub fn translation(t: [f32; 3]) -> Self {
        AffineParams {
            translation_mm: t,
            ..AffineParams::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == [1.0; 3] && self.rotation_deg == [0.0; 3] && self.translation_mm == [0.0; 3]
    }

    fn validate(&self) -> Result<()> {
        let finite = self
            .scale
            .iter()
            .chain(&self.rotation_deg)
            .chain(&self.translation_mm)
            .all(|v| v.is_finite());
        if !finite || self.scale.iter().any(|&s| s <= 0.0) {
            return Err(AugmentError::InvalidParams(format!("affine {self:?}")));
        }
        Ok(())
    }

    fn rotation(&self) -> Mat3 {
        let [ax, ay, az] = self.rotation_deg.map(|d| f64::from(d).to_radians());
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }

    /// `(A, b)` with `source = A * (output - c) + b + c`, in millimetres.
    pub(crate) fn output_to_source(&self) -> (Mat3, [f64; 3]) {
        let r = self.rotation();
        let s = self.scale.map(f64::from);
        let t = self.translation_mm.map(f64::from);
        if self.inverse {
            // source = S R (y - c) + t + c
            let mut a = r;
            for (row, si) in a.iter_mut().zip(s) {
                for v in row.iter_mut() {
                    *v *= si;
                }
            }
            (a, t)
        } else {
            // source = R^T S^-1 (y - c - t)
            let mut a = transpose(&r);
            for row in a.iter_mut() {
                for (v, si) in row.iter_mut().zip(s) {
                    *v /= si;
                }
            }
            let at = apply(&a, t);
            (a, [-at[0], -at[1], -at[2]])
        }
    }
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn apply(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Parameters of the inverse mapping.
///
/// Rotation-free parameters invert in closed form (`1/s`, `-t/s`); anything
/// with a rotation toggles [`AffineParams::inverse`].
pub fn invert_affine(p: &AffineParams) -> Result<AffineParams> {
    p.validate()?;
    if p.rotation_deg == [0.0; 3] {
        if p.inverse {
            return Ok(AffineParams { inverse: false, ..*p });
        }
        let mut q = AffineParams::identity();
        for a in 0..3 {
            q.scale[a] = 1.0 / p.scale[a];
            q.translation_mm[a] = -p.translation_mm[a] / p.scale[a];
        }
        return Ok(q);
    }
    Ok(AffineParams {
        inverse: !p.inverse,
        ..*p
    })
}

const EDGE_TOLERANCE: f64 = 1e-4;

/// Trilinear sample at continuous voxel coordinates; 0 outside the grid.
pub(crate) fn sample_trilinear(v: &Volume, pos: [f64; 3]) -> f32 {
    let dims = v.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let p = pos[a];
        if p < -EDGE_TOLERANCE || p > hi + EDGE_TOLERANCE {
            return 0.0;
        }
        let p = p.clamp(0.0, hi);
        if dims[a] == 1 {
            base[a] = 0;
            frac[a] = 0.0;
        } else {
            let i = (p.floor() as usize).min(dims[a] - 2);
            base[a] = i;
            frac[a] = p - i as f64;
        }
    }
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let mut w = 1.0f64;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let upper = (corner >> a) & 1 == 1;
            if upper {
                w *= frac[a];
                idx[a] = (base[a] + 1).min(dims[a] - 1);
            } else {
                w *= 1.0 - frac[a];
                idx[a] = base[a];
            }
        }
        if w != 0.0 {
            acc += w * f64::from(v.get(idx[0], idx[1], idx[2]));
        }
    }
    acc as f32
}

/// Resamples `v` on its own grid under `p`. Identity parameters return an
/// exact copy.
pub fn apply_affine(v: &Volume, p: &AffineParams) -> Result<Volume> {
    p.validate()?;
    if p.is_identity() {
        return Ok(v.clone());
    }
    let (a, b) = p.output_to_source();
    let dims = v.dims();
    let sp = v.spacing().map(f64::from);
    let centre = [0, 1, 2].map(|i| (dims[i] - 1) as f64 / 2.0 * sp[i]);
    let out = Volume::from_fn(dims, v.spacing(), |x, y, z| {
        let rel = [
            x as f64 * sp[0] - centre[0],
            y as f64 * sp[1] - centre[1],
            z as f64 * sp[2] - centre[2],
        ];
        let src = apply(&a, rel);
        let pos = [0, 1, 2].map(|i| (src[i] + b[i] + centre[i]) / sp[i]);
        sample_trilinear(v, pos)
    })?;
    Ok(out)
}
