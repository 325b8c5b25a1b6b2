//! The uncertainty-case registry and the Monte-Carlo sampling engine.
//!
//! Cases 1-6 are test-time dropout at rates 0.03, 0.06, 0.09, 0.12, 0.15 and
//! 0.40. Cases 7-14 are test-time augmentation: affine, ghosting, bias field
//! and all three combined, first at the low level, then at the high level.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{sample_transform, AugmentError, Family, Level, TransformSample};
use crate::predictor::{Predictor, PredictorError};
use crate::seed::SeedPath;
use crate::volume::{Volume, VolumeError};

pub const DROPOUT_RATES: [f32; 6] = [0.03, 0.06, 0.09, 0.12, 0.15, 0.40];
pub const DEFAULT_SAMPLES: usize = 50;
pub const N_CASES: usize = 14;

const AUGMENT_ORDER: [(Family, Level); 8] = [
    (Family::Affine, Level::Low),
    (Family::Ghosting, Level::Low),
    (Family::BiasField, Level::Low),
    (Family::Combined, Level::Low),
    (Family::Affine, Level::High),
    (Family::Ghosting, Level::High),
    (Family::BiasField, Level::High),
    (Family::Combined, Level::High),
];

#[derive(Debug, Error)]
pub enum UqError {
    #[error("unknown case id {0} (valid: 1-14)")]
    UnknownCase(u8),
    #[error("sample stack needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = UqError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CaseKind {
    Dropout { rate: f32 },
    Augment { family: Family, level: Level },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: u8,
    #[serde(flatten)]
    pub kind: CaseKind,
}

impl CaseSpec {
    pub fn from_id(id: u8) -> Result<Self> {
        let kind = match id {
            1..=6 => CaseKind::Dropout {
                rate: DROPOUT_RATES[id as usize - 1],
            },
            7..=14 => {
                let (family, level) = AUGMENT_ORDER[id as usize - 7];
                CaseKind::Augment { family, level }
            }
            _ => return Err(UqError::UnknownCase(id)),
        };
        Ok(CaseSpec { id, kind })
    }

    /// All fourteen cases in id order.
    pub fn all() -> Vec<CaseSpec> {
        (1..=N_CASES as u8)
            .map(|id| CaseSpec::from_id(id).expect("registry id"))
            .collect()
    }

    pub fn is_dropout(&self) -> bool {
        matches!(self.kind, CaseKind::Dropout { .. })
    }

    pub fn dropout_rate(&self) -> Option<f32> {
        match self.kind {
            CaseKind::Dropout { rate } => Some(rate),
            CaseKind::Augment { .. } => None,
        }
    }
}

impl fmt::Display for CaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CaseKind::Dropout { rate } => write!(f, "TTD {rate:.2}"),
            CaseKind::Augment { family, level } => write!(f, "TTA {} {}", family.name(), level.name()),
        }
    }
}

/// Parses `"1-14"`, `"1,3,7-9"` and similar lists of case ids.
pub fn parse_case_list(s: &str) -> Result<Vec<CaseSpec>, String> {
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |t: &str| t.trim().parse::<u8>().map_err(|_| format!("bad case id {t:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty case range {part:?}"));
                }
                ids.extend(a..=b);
            }
            None => ids.push(parse(part)?),
        }
    }
    if ids.is_empty() {
        return Err("no cases selected".into());
    }
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| CaseSpec::from_id(id).map_err(|e| e.to_string()))
        .collect()
}

/// What was drawn for one stochastic pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PassDraw {
    Dropout { rate: f32, seed: u64 },
    Augment { transform: TransformSample },
}

/// `n` probability volumes for one (subject, case).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    pub case_id: u8,
    pub subject: usize,
    samples: Vec<Volume>,
}

impl SampleStack {
    pub fn new(case_id: u8, subject: usize, samples: Vec<Volume>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(UqError::TooFewSamples(samples.len()));
        }
        for (index, s) in samples.iter().enumerate() {
            samples[0].check_same_dims(s)?;
            if s.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(UqError::InvalidSample {
                    index,
                    reason: "probability outside [0, 1]".into(),
                });
            }
        }
        Ok(SampleStack {
            case_id,
            subject,
            samples,
        })
    }

    pub fn samples(&self) -> &[Volume] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean: Volume,
    /// Population variance.
    pub variance: Volume,
    /// Binary entropy of the mean, in bits.
    pub entropy: Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub samples: usize,
    pub seed: u64,
    /// Threshold each sample at 0.5 before computing statistics.
    pub binarize: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            binarize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseRun {
    pub stack: SampleStack,
    pub passes: Vec<PassDraw>,
}

fn pass_path(seed: u64, case_id: u8, pass: usize) -> SeedPath {
    SeedPath::root(seed).index(u64::from(case_id)).index(pass as u64)
}

fn finish(p: Volume, binarize: bool) -> Result<Volume> {
    if binarize {
        Ok(p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })?)
    } else {
        Ok(p)
    }
}

/// `n` dropout passes on the unaugmented image.
pub fn run_dropout_passes(
    pred: &dyn Predictor,
    image: &Volume,
    rate: f32,
    case_id: u8,
    subject: usize,
    opts: &RunOptions,
) -> Result<CaseRun> {
    pred.check_dims(image.dims())?;
    let results: Vec<(Volume, PassDraw)> = (0..opts.samples)
        .into_par_iter()
        .map(|pass| {
            let seed = pass_path(opts.seed, case_id, pass).value();
            let p = finish(pred.predict(image, rate, seed)?, opts.binarize)?;
            Ok((p, PassDraw::Dropout { rate, seed }))
        })
        .collect::<Result<_>>()?;
    let (samples, passes) = results.into_iter().unzip();
    Ok(CaseRun {
        stack: SampleStack::new(case_id, subject, samples)?,
        passes,
    })
}

/// One deterministic pass per transform; spatial components are undone on
/// the output so every sample lives on the original grid.
pub fn run_augment_passes(
    pred: &dyn Predictor,
    image: &Volume,
    transforms: &[TransformSample],
    case_id: u8,
    subject: usize,
    binarize: bool,
) -> Result<CaseRun> {
    pred.check_dims(image.dims())?;
    let samples: Vec<Volume> = transforms
        .par_iter()
        .map(|t| {
            let augmented = t.apply(image)?;
            let p = pred.predict(&augmented, 0.0, 0)?;
            finish(t.invert_spatial(&p)?, binarize)
        })
        .collect::<Result<_>>()?;
    Ok(CaseRun {
        stack: SampleStack::new(case_id, subject, samples)?,
        passes: transforms
            .iter()
            .map(|t| PassDraw::Augment { transform: t.clone() })
            .collect(),
    })
}

/// Draws the per-pass transforms for an augmentation case.
pub fn draw_transforms(case: &CaseSpec, samples: usize, seed: u64) -> Result<Vec<TransformSample>> {
    (0..samples)
        .map(|pass| {
            let mut rng = pass_path(seed, case.id, pass).label("augment").rng();
            Ok(sample_transform(case, &mut rng)?)
        })
        .collect()
}

/// Samples `opts.samples` stochastic predictions for one case. Pass `i`
/// draws from the seed path `(opts.seed, case.id, i)`, so results do not
/// depend on scheduling.
pub fn run_case(
    pred: &dyn Predictor,
    image: &Volume,
    case: &CaseSpec,
    subject: usize,
    opts: &RunOptions,
) -> Result<CaseRun> {
    match case.kind {
        CaseKind::Dropout { rate } => run_dropout_passes(pred, image, rate, case.id, subject, opts),
        CaseKind::Augment { .. } => {
            let transforms = draw_transforms(case, opts.samples, opts.seed)?;
            run_augment_passes(pred, image, &transforms, case.id, subject, opts.binarize)
        }
    }
}

/// Binary entropy in bits with `0 log 0 = 0`.
pub fn binary_entropy_bits(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    let h = -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
    h.clamp(0.0, 1.0)
}

pub fn uncertainty_maps(stack: &SampleStack) -> Result<UncertaintyMaps> {
    let samples = stack.samples();
    if samples.len() < 2 {
        return Err(UqError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let voxels = samples[0].len();
    let mut mean = Vec::with_capacity(voxels);
    let mut variance = Vec::with_capacity(voxels);
    let mut entropy = Vec::with_capacity(voxels);
    for i in 0..voxels {
        let m = samples.iter().map(|s| f64::from(s.data()[i])).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|s| (f64::from(s.data()[i]) - m).powi(2))
            .sum::<f64>()
            / n;
        let m = m.clamp(0.0, 1.0);
        mean.push(m as f32);
        variance.push(var.clamp(0.0, 0.25) as f32);
        entropy.push(binary_entropy_bits(m) as f32);
    }
    let grid = &samples[0];
    Ok(UncertaintyMaps {
        mean: grid.with_data(mean)?,
        variance: grid.with_data(variance)?,
        entropy: grid.with_data(entropy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn registry_matches_case_table() {
        let cases = CaseSpec::all();
        assert_eq!(cases.len(), 14);
        for (i, rate) in DROPOUT_RATES.iter().enumerate() {
            assert_eq!(cases[i].kind, CaseKind::Dropout { rate: *rate });
        }
        assert_eq!(cases[6].to_string(), "TTA affine low");
        assert_eq!(cases[7].to_string(), "TTA ghosting low");
        assert_eq!(cases[8].to_string(), "TTA bias-field low");
        assert_eq!(cases[9].to_string(), "TTA combined low");
        assert_eq!(cases[10].to_string(), "TTA affine high");
        assert_eq!(cases[13].to_string(), "TTA combined high");
        assert_eq!(cases[5].to_string(), "TTD 0.40");
        assert!(CaseSpec::from_id(0).is_err());
        assert!(CaseSpec::from_id(15).is_err());
    }

    #[test]
    fn case_lists() {
        let ids = |s: &str| parse_case_list(s).unwrap().iter().map(|c| c.id).collect::<Vec<_>>();
        assert_eq!(ids("1-14").len(), 14);
        assert_eq!(ids("3, 1,7-9,8"), vec![1, 3, 7, 8, 9]);
        assert!(parse_case_list("0-3").is_err());
        assert!(parse_case_list("5-2").is_err());
        assert!(parse_case_list("x").is_err());
        assert!(parse_case_list("").is_err());
    }

    fn stack_of(values: &[&[f32]]) -> SampleStack {
        let samples = values
            .iter()
            .map(|v| Volume::new([v.len(), 1, 1], [1.0; 3], v.to_vec()).unwrap())
            .collect();
        SampleStack::new(1, 0, samples).unwrap()
    }

    #[test]
    fn extremal_voxels() {
        let s = stack_of(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let m = uncertainty_maps(&s).unwrap();
        assert_eq!(m.mean.data(), &[1.0, 0.5]);
        assert_eq!(m.variance.data(), &[0.0, 0.25]);
        assert_eq!(m.entropy.data(), &[0.0, 1.0]);
    }

    #[test]
    fn entropy_at_three_quarters() {
        let expected = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert!((binary_entropy_bits(0.75) - expected).abs() < 1e-12);
        assert!((binary_entropy_bits(0.75) - 0.811278).abs() < 1e-6);
        let s = stack_of(&[&[1.0], &[1.0], &[1.0], &[0.0]]);
        assert!((f64::from(uncertainty_maps(&s).unwrap().entropy.data()[0]) - 0.811278).abs() < 1e-6);
    }

    #[test]
    fn stack_validation() {
        let one = vec![Volume::zeros([2, 1, 1], [1.0; 3]).unwrap()];
        assert!(matches!(SampleStack::new(1, 0, one), Err(UqError::TooFewSamples(1))));
        let bad = vec![
            Volume::zeros([2, 1, 1], [1.0; 3]).unwrap(),
            Volume::filled([2, 1, 1], [1.0; 3], 1.5).unwrap(),
        ];
        assert!(SampleStack::new(1, 0, bad).is_err());
        let mismatched = vec![
            Volume::zeros([2, 1, 1], [1.0; 3]).unwrap(),
            Volume::zeros([1, 2, 1], [1.0; 3]).unwrap(),
        ];
        assert!(SampleStack::new(1, 0, mismatched).is_err());
    }

    proptest! {
        #[test]
        fn maps_respect_bounds_and_relabeling(
            raw in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 6), 2..8)
        ) {
            let views: Vec<&[f32]> = raw.iter().map(|v| v.as_slice()).collect();
            let maps = uncertainty_maps(&stack_of(&views)).unwrap();
            for i in 0..6 {
                let (m, v, h) = (maps.mean.data()[i], maps.variance.data()[i], maps.entropy.data()[i]);
                prop_assert!((0.0..=1.0).contains(&m));
                prop_assert!((0.0..=0.25).contains(&v));
                prop_assert!((0.0..=1.0).contains(&h));
            }
            let flipped: Vec<Vec<f32>> = raw.iter().map(|v| v.iter().map(|p| 1.0 - p).collect()).collect();
            let views: Vec<&[f32]> = flipped.iter().map(|v| v.as_slice()).collect();
            let other = uncertainty_maps(&stack_of(&views)).unwrap();
            for i in 0..6 {
                prop_assert!((maps.entropy.data()[i] - other.entropy.data()[i]).abs() < 1e-5);
                prop_assert!((maps.variance.data()[i] - other.variance.data()[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn entropy_peaks_at_half(p in 0.0f64..=1.0) {
            let h = binary_entropy_bits(p);
            prop_assert!(h <= 1.0);
            if (p - 0.5).abs() > 1e-3 {
                prop_assert!(h < 1.0);
            }
            if p > 0.0 && p < 1.0 {
                prop_assert!(h > 0.0);
            }
        }
    }
}
