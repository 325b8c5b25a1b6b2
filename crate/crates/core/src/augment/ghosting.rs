//! Motion ghosting: periodic k-space planes along one axis are attenuated.
//!
//! With `n` samples along the ghost axis and `g` ghosts, every `k = n / g`-th
//! frequency plane (`k, 2k, ...`) is scaled by `1 - strength`, except planes
//! within `ceil(0.02 n)` of zero frequency. The image is the real part of the
//! inverse transform.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AugmentError, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhostingParams {
    /// Attenuation of the ghost planes, as a fraction of their magnitude.
    pub strength: f32,
    pub num_ghosts: u32,
    pub axis: usize,
}

impl GhostingParams {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) || self.num_ghosts < 2 || self.axis > 2 {
            return Err(AugmentError::InvalidParams(format!("ghosting {self:?}")));
        }
        Ok(())
    }
}

/// Half-width of the protected band around zero frequency.
fn protected_halfwidth(n: usize) -> usize {
    (0.02 * n as f64).ceil() as usize
}

/// FFT indices of the attenuated planes for an axis of length `n`.
pub fn ghost_planes(n: usize, num_ghosts: u32) -> Vec<usize> {
    let k = n / num_ghosts.max(1) as usize;
    if k == 0 {
        return Vec::new();
    }
    let w = protected_halfwidth(n);
    (1..)
        .map(|m| m * k)
        .take_while(|&i| i < n)
        .filter(|&i| {
            let signed = if i <= n / 2 { i } else { n - i };
            signed > w
        })
        .collect()
}

pub fn apply_ghosting(v: &Volume, p: &GhostingParams) -> Result<Volume> {
    p.validate()?;
    let dims = v.dims();
    let n = dims[p.axis];
    if n < 4 {
        return Err(AugmentError::AxisTooShort { axis: p.axis, len: n });
    }
    if p.num_ghosts as usize > n {
        return Err(AugmentError::InvalidParams(format!(
            "{} ghosts on an axis of length {n}",
            p.num_ghosts
        )));
    }
    let planes = ghost_planes(n, p.num_ghosts);
    let gain = 1.0 - f64::from(p.strength);

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let stride = match p.axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let src = v.data();
    let mut out = vec![0.0f32; src.len()];
    let mut line = vec![Complex::new(0.0f64, 0.0); n];
    let scale = 1.0 / n as f64;

    for start in (0..src.len()).filter(|&i| (i / stride) % n == 0) {
        for (j, c) in line.iter_mut().enumerate() {
            *c = Complex::new(f64::from(src[start + j * stride]), 0.0);
        }
        fwd.process(&mut line);
        for &i in &planes {
            line[i] *= gain;
        }
        inv.process(&mut line);
        for (j, c) in line.iter().enumerate() {
            out[start + j * stride] = (c.re * scale) as f32;
        }
    }
    Ok(v.with_data(out)?)
}
