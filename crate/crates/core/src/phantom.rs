//! Synthetic subjects: a smooth noisy image with ellipsoidal lesions and the
//! matching binary label.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::SeedPath;
use crate::volume::{Volume, VolumeError};

const MAX_PLACEMENT_ATTEMPTS: usize = 200;
const SATELLITE_RADIUS: f32 = 1.5;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place lesion {lesion} after {attempts} attempts")]
    Placement { lesion: usize, attempts: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_lesions: usize,
    /// Lesion radius bounds in voxels.
    pub radius_range: [f32; 2],
    /// Per-axis semi-axis jitter: each axis is `r * (1 + elongation * U(-1, 1))`.
    /// Zero gives spheres.
    pub elongation: f32,
    pub background_mean: f32,
    pub foreground_mean: f32,
    pub noise_std: f32,
    /// Adds a small lesion detached from the first one.
    pub satellite: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 16],
            spacing: [1.0; 3],
            n_lesions: 2,
            radius_range: [2.5, 4.5],
            elongation: 0.25,
            background_mean: 0.3,
            foreground_mean: 1.0,
            noise_std: 0.1,
            satellite: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    /// Centre in voxel coordinates.
    pub center: [f32; 3],
    /// Semi-axes in voxels.
    pub semi_axes: [f32; 3],
}

impl Lesion {
    fn contains(&self, p: [f32; 3]) -> bool {
        let mut q = 0.0f32;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi_axes[a];
            q += d * d;
        }
        // tolerance keeps lattice points on the surface inside
        q <= 1.0 + 1e-5
    }

    fn extent(&self) -> f32 {
        self.semi_axes.iter().cloned().fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub label: Volume,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?}", self.dims));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("spacing {:?}", self.spacing));
        }
        if self.n_lesions == 0 {
            return bad("n_lesions must be at least 1".into());
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin.is_finite() && rmax.is_finite() && rmin > 0.0 && rmax >= rmin) {
            return bad(format!("radius range {:?}", self.radius_range));
        }
        if !(0.0..1.0).contains(&self.elongation) {
            return bad(format!("elongation {} outside [0, 1)", self.elongation));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise std {}", self.noise_std));
        }
        if !(self.background_mean.is_finite() && self.foreground_mean.is_finite()) {
            return bad("intensity means must be finite".into());
        }
        let reach = (rmax * (1.0 + self.elongation)).ceil() as usize + 1;
        if self.dims.iter().any(|&d| 2 * reach + 1 > d) {
            return bad(format!(
                "lesions of radius up to {rmax} (elongation {}) do not fit in {:?}",
                self.elongation, self.dims
            ));
        }
        Ok(())
    }
}

fn sample_center(rng: &mut ChaCha8Rng, dims: [usize; 3], margin: usize) -> [f32; 3] {
    let mut c = [0.0f32; 3];
    for a in 0..3 {
        c[a] = rng.random_range(margin..=dims[a] - 1 - margin) as f32;
    }
    c
}

fn place_lesions(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Lesion>, PhantomError> {
    let [rmin, rmax] = spec.radius_range;
    let mut lesions: Vec<Lesion> = Vec::with_capacity(spec.n_lesions + 1);
    for index in 0..spec.n_lesions {
        let r = if rmax > rmin {
            rng.random_range(rmin..=rmax)
        } else {
            rmin
        };
        let mut semi_axes = [r; 3];
        for s in &mut semi_axes {
            *s = r * (1.0 + spec.elongation * rng.random_range(-1.0f32..=1.0));
        }
        let margin = semi_axes.iter().cloned().fold(0.0, f32::max).ceil() as usize + 1;
        let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
            let candidate = Lesion {
                center: sample_center(rng, spec.dims, margin),
                semi_axes,
            };
            let clear = lesions
                .iter()
                .all(|o| dist(o.center, candidate.center) > o.extent() + candidate.extent() + 1.0);
            clear.then_some(candidate)
        });
        match placed {
            Some(l) => lesions.push(l),
            None => {
                return Err(PhantomError::Placement {
                    lesion: index,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }

    if spec.satellite {
        let parent = lesions[0];
        let margin = SATELLITE_RADIUS.ceil() as usize + 1;
        let lo = margin as f32;
        let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
            // random direction, a small gap beyond the parent's surface
            let mut dir = [0.0f32; 3];
            for d in &mut dir {
                *d = rng.random_range(-1.0f32..=1.0);
            }
            let norm = dir.iter().map(|d| d * d).sum::<f32>().sqrt();
            if norm < 1e-3 {
                return None;
            }
            let gap = rng.random_range(2.0f32..=4.0);
            let reach = parent.extent() + SATELLITE_RADIUS + gap;
            let mut center = [0.0f32; 3];
            for a in 0..3 {
                center[a] = (parent.center[a] + reach * dir[a] / norm).round();
                let hi = (spec.dims[a] - 1 - margin) as f32;
                if center[a] < lo || center[a] > hi {
                    return None;
                }
            }
            let candidate = Lesion {
                center,
                semi_axes: [SATELLITE_RADIUS; 3],
            };
            let clear = lesions
                .iter()
                .all(|o| dist(o.center, center) > o.extent() + SATELLITE_RADIUS + 1.0);
            clear.then_some(candidate)
        });
        match placed {
            Some(l) => lesions.push(l),
            None => {
                return Err(PhantomError::Placement {
                    lesion: spec.n_lesions,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(lesions)
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f32>().sqrt()
}

/// Rasterizes `lesions` into a binary label volume.
pub fn render_label(dims: [usize; 3], spacing: [f32; 3], lesions: &[Lesion]) -> Result<Volume, VolumeError> {
    Volume::from_fn(dims, spacing, |x, y, z| {
        let p = [x as f32, y as f32, z as f32];
        if lesions.iter().any(|l| l.contains(p)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean over the 3x3x3 neighbourhood with edge replication.
fn box_smooth(v: &Volume) -> Result<Volume, VolumeError> {
    let [nx, ny, nz] = v.dims();
    let clamp = |i: usize, d: isize, n: usize| (i as isize + d).clamp(0, n as isize - 1) as usize;
    Volume::from_fn(v.dims(), v.spacing(), |x, y, z| {
        let mut acc = 0.0f64;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += f64::from(v.get(clamp(x, dx, nx), clamp(y, dy, ny), clamp(z, dz, nz)));
                }
            }
        }
        (acc / 27.0) as f32
    })
}

/// Image and label for one subject; a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let root = SeedPath::root(spec.seed);
    let mut lesion_rng = root.label("lesions").rng();
    let lesions = place_lesions(spec, &mut lesion_rng)?;
    let label = render_label(spec.dims, spec.spacing, &lesions)?;

    let contrast = spec.foreground_mean - spec.background_mean;
    let base = label.map(|l| spec.background_mean + contrast * l)?;
    let mut data = box_smooth(&base)?.into_data();
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
        let mut noise_rng = root.label("noise").rng();
        for v in &mut data {
            *v += normal.sample(&mut noise_rng);
        }
    }
    let image = label.with_data(data)?;
    Ok(Phantom { image, label })
}

/// Subject `i` uses seed `spec.seed + i`.
pub fn generate_cohort(spec: &PhantomSpec, n_subjects: usize) -> Result<Vec<Phantom>, PhantomError> {
    if n_subjects == 0 {
        return Err(PhantomError::InvalidSpec("cohort needs at least one subject".into()));
    }
    (0..n_subjects as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(i);
            generate_phantom(&s)
        })
        .collect()
}
