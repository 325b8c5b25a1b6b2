//! Test-time augmentation families: affine motion, k-space ghosting and
//! polynomial bias fields, each with a "low" (likely in practice) and a
//! "high" (uncommon but plausible) parameter distribution.

mod affine;
mod bias;
mod ghosting;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uq::{CaseKind, CaseSpec};
use crate::volume::{Volume, VolumeError};

pub use affine::{apply_affine, invert_affine, AffineParams};
pub use bias::{apply_bias, bias_field, monomials, BiasFieldParams};
pub use ghosting::{apply_ghosting, ghost_planes, GhostingParams};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid transform parameters: {0}")]
    InvalidParams(String),
    #[error("axis {axis} has length {len}; ghosting needs at least 4 samples")]
    AxisTooShort { axis: usize, len: usize },
    #[error("case {0} is a dropout case and has no augmentation")]
    NotAugmentationCase(u8),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Affine,
    Ghosting,
    BiasField,
    /// Affine, ghosting and bias field drawn at the same level and applied in
    /// that order.
    Combined,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Affine => "affine",
            Family::Ghosting => "ghosting",
            Family::BiasField => "bias-field",
            Family::Combined => "combined",
        }
    }
}

/// Uniform sampling bounds for one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelRanges {
    pub scale: (f32, f32),
    pub rotation_deg: (f32, f32),
    pub translation_mm: (f32, f32),
    pub ghost_strength: (f32, f32),
    /// Inclusive integer range.
    pub num_ghosts: (u32, u32),
    pub ghost_axis: usize,
    pub bias_max_coeff: f32,
    pub bias_order: u32,
}

impl Level {
    pub fn ranges(self) -> LevelRanges {
        match self {
            Level::Low => LevelRanges {
                scale: (0.98, 1.02),
                rotation_deg: (-5.0, 5.0),
                translation_mm: (-5.0, 5.0),
                ghost_strength: (0.0, 0.15),
                num_ghosts: (2, 6),
                ghost_axis: 1,
                bias_max_coeff: 0.2,
                bias_order: 3,
            },
            Level::High => LevelRanges {
                scale: (0.80, 1.20),
                rotation_deg: (-45.0, 45.0),
                translation_mm: (-5.0, 5.0),
                ghost_strength: (0.25, 0.75),
                num_ghosts: (2, 6),
                ghost_axis: 1,
                bias_max_coeff: 0.8,
                bias_order: 3,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::High => "high",
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Independent draws per axis for scale, rotation and translation.
pub fn sample_affine<R: Rng + ?Sized>(level: Level, rng: &mut R) -> AffineParams {
    let r = level.ranges();
    let mut p = AffineParams::identity();
    for a in 0..3 {
        p.scale[a] = uniform(rng, r.scale);
    }
    for a in 0..3 {
        p.rotation_deg[a] = uniform(rng, r.rotation_deg);
    }
    for a in 0..3 {
        p.translation_mm[a] = uniform(rng, r.translation_mm);
    }
    p
}

pub fn sample_ghosting<R: Rng + ?Sized>(level: Level, rng: &mut R) -> GhostingParams {
    let r = level.ranges();
    GhostingParams {
        strength: uniform(rng, r.ghost_strength),
        num_ghosts: rng.random_range(r.num_ghosts.0..=r.num_ghosts.1),
        axis: r.ghost_axis,
    }
}

pub fn sample_bias<R: Rng + ?Sized>(level: Level, rng: &mut R) -> BiasFieldParams {
    let r = level.ranges();
    let n = monomials(r.bias_order).len();
    let c = r.bias_max_coeff;
    BiasFieldParams {
        order: r.bias_order,
        coeffs: (0..n).map(|_| rng.random_range(-c..=c)).collect(),
    }
}

/// One draw of the transforms a case applies to a single forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghosting: Option<GhostingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasFieldParams>,
}

impl TransformSample {
    pub fn is_empty(&self) -> bool {
        self.affine.is_none() && self.ghosting.is_none() && self.bias.is_none()
    }

    /// Applies affine, then ghosting, then bias field.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        if self.is_empty() {
            return Err(AugmentError::InvalidParams("empty transform sample".into()));
        }
        let mut out = match &self.affine {
            Some(p) => apply_affine(v, p)?,
            None => v.clone(),
        };
        if let Some(g) = &self.ghosting {
            out = apply_ghosting(&out, g)?;
        }
        if let Some(b) = &self.bias {
            out = apply_bias(&out, b)?;
        }
        Ok(out)
    }

    /// Maps an output computed on the augmented image back to the original
    /// grid. Only the spatial (affine) component is undone.
    pub fn invert_spatial(&self, v: &Volume) -> Result<Volume> {
        match &self.affine {
            Some(p) => apply_affine(v, &invert_affine(p)?),
            None => Ok(v.clone()),
        }
    }
}

/// Draws the parameters for a test-time augmentation case.
pub fn sample_transform<R: Rng + ?Sized>(case: &CaseSpec, rng: &mut R) -> Result<TransformSample> {
    let (family, level) = match case.kind {
        CaseKind::Augment { family, level } => (family, level),
        CaseKind::Dropout { .. } => return Err(AugmentError::NotAugmentationCase(case.id)),
    };
    let mut s = TransformSample {
        affine: None,
        ghosting: None,
        bias: None,
    };
    if matches!(family, Family::Affine | Family::Combined) {
        s.affine = Some(sample_affine(level, rng));
    }
    if matches!(family, Family::Ghosting | Family::Combined) {
        s.ghosting = Some(sample_ghosting(level, rng));
    }
    if matches!(family, Family::BiasField | Family::Combined) {
        s.bias = Some(sample_bias(level, rng));
    }
    Ok(s)
}
