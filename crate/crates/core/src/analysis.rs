//! Cross-case statistics: voxelwise median/IQR, the entropy support mask,
//! masked Pearson correlation matrices and mean non-zero entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Mask, Volume, VolumeError};

/// Values at or below this count as zero.
pub const NONZERO_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} inputs, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("entropy support mask is empty")]
    EmptyMask,
    #[error("correlation undefined: a map is constant on the mask")]
    UndefinedCorrelation,
    #[error("matrix size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("predicted-error inputs: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Quantile at `q` of sorted values, interpolating linearly at `q * (K - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn voxelwise_median_iqr(maps: &[Volume]) -> Result<(Volume, Volume)> {
    if maps.len() < 2 {
        return Err(AnalysisError::TooFew {
            needed: 2,
            got: maps.len(),
        });
    }
    for m in &maps[1..] {
        maps[0].check_same_dims(m)?;
    }
    let n = maps[0].len();
    let mut median = Vec::with_capacity(n);
    let mut iqr = Vec::with_capacity(n);
    let mut buf = vec![0.0f64; maps.len()];
    for i in 0..n {
        for (b, m) in buf.iter_mut().zip(maps) {
            *b = f64::from(m.data()[i]);
        }
        buf.sort_by(f64::total_cmp);
        median.push(quantile_sorted(&buf, 0.5) as f32);
        iqr.push((quantile_sorted(&buf, 0.75) - quantile_sorted(&buf, 0.25)) as f32);
    }
    Ok((maps[0].with_data(median)?, maps[0].with_data(iqr)?))
}

/// Voxels whose median entropy across cases is non-zero.
pub fn entropy_support_mask(median_entropy: &Volume) -> Result<Mask> {
    let bits = median_entropy
        .data()
        .iter()
        .map(|&v| f64::from(v) > NONZERO_EPS)
        .collect();
    let mask = Mask::new(median_entropy.dims(), bits)?;
    if mask.count() == 0 {
        return Err(AnalysisError::EmptyMask);
    }
    Ok(mask)
}

/// Pearson r between two value sequences.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AnalysisError::SizeMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(AnalysisError::TooFew {
            needed: 2,
            got: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation);
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn masked_values(v: &Volume, m: &Mask) -> Vec<f64> {
    m.indices().map(|i| f64::from(v.data()[i])).collect()
}

/// Pearson r of two maps over the masked voxels.
pub fn spatial_correlation(a: &Volume, b: &Volume, m: &Mask) -> Result<f64> {
    a.check_same_dims(b)?;
    m.check_applies_to(a)?;
    pearson(&masked_values(a, m), &masked_values(b, m))
}

/// A K×K matrix of correlations between cases, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// Case ids labelling rows and columns.
    pub labels: Vec<u8>,
    /// Subject index, or `None` for a cross-subject mean.
    pub subject: Option<usize>,
    /// `None` marks an undefined entry.
    pub values: Vec<Option<f64>>,
    /// Subjects contributing to each entry.
    pub counts: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size() + j]
    }

    pub fn position(&self, case_id: u8) -> Option<usize> {
        self.labels.iter().position(|&l| l == case_id)
    }

    /// Entry for a pair of case ids.
    pub fn by_case(&self, a: u8, b: u8) -> Option<f64> {
        self.get(self.position(a)?, self.position(b)?)
    }
}

pub fn correlation_matrix(
    labels: &[u8],
    maps: &[Volume],
    mask: &Mask,
    subject: Option<usize>,
) -> Result<CorrelationMatrix> {
    if labels.len() != maps.len() {
        return Err(AnalysisError::SizeMismatch {
            expected: labels.len(),
            got: maps.len(),
        });
    }
    for m in maps {
        mask.check_applies_to(m)?;
    }
    let k = maps.len();
    let vals: Vec<Vec<f64>> = maps.iter().map(|m| masked_values(m, mask)).collect();
    let mut values = vec![None; k * k];
    for i in 0..k {
        for j in i..k {
            let r = match pearson(&vals[i], &vals[j]) {
                Ok(r) => Some(if i == j { 1.0 } else { r }),
                Err(AnalysisError::UndefinedCorrelation) => None,
                Err(e) => return Err(e),
            };
            values[i * k + j] = r;
            values[j * k + i] = r;
        }
    }
    let counts = values.iter().map(|v| usize::from(v.is_some())).collect();
    Ok(CorrelationMatrix {
        labels: labels.to_vec(),
        subject,
        values,
        counts,
    })
}

/// Elementwise mean across subjects, skipping undefined entries. With
/// `fisher_z` the mean is taken of `atanh(r)` and mapped back.
pub fn mean_correlation_matrix(mats: &[CorrelationMatrix], fisher_z: bool) -> Result<CorrelationMatrix> {
    let first = mats.first().ok_or(AnalysisError::TooFew { needed: 1, got: 0 })?;
    let k = first.size();
    for m in mats {
        if m.labels != first.labels {
            return Err(AnalysisError::SizeMismatch {
                expected: k,
                got: m.size(),
            });
        }
    }
    let mut values = vec![None; k * k];
    let mut counts = vec![0; k * k];
    for idx in 0..k * k {
        let mut sum = 0.0;
        for r in mats.iter().filter_map(|m| m.values[idx]) {
            sum += if fisher_z {
                r.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh()
            } else {
                r
            };
            counts[idx] += 1;
        }
        if counts[idx] > 0 {
            let mean = sum / counts[idx] as f64;
            values[idx] = Some(if fisher_z { mean.tanh() } else { mean });
        }
    }
    for i in 0..k {
        if values[i * k + i].is_some() {
            values[i * k + i] = Some(1.0);
        }
    }
    Ok(CorrelationMatrix {
        labels: first.labels.clone(),
        subject: None,
        values,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    /// `None` when no voxel is non-zero.
    pub mean: Option<f64>,
    pub count: usize,
}

pub fn mean_nonzero_entropy(ent: &Volume) -> CaseSummary {
    let (sum, count) = ent
        .data()
        .iter()
        .map(|&v| f64::from(v))
        .filter(|&v| v > NONZERO_EPS)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    CaseSummary {
        mean: (count > 0).then(|| sum / count as f64),
        count,
    }
}

/// Per-voxel `|label - confidence|`.
pub fn predicted_error_target(label: &Volume, confidence: &Volume) -> Result<Volume> {
    label.check_same_dims(confidence)?;
    if label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AnalysisError::InvalidInput("label is not binary".into()));
    }
    if confidence.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(AnalysisError::InvalidInput("confidence outside [0, 1]".into()));
    }
    let data = label
        .data()
        .iter()
        .zip(confidence.data())
        .map(|(&l, &c)| (l - c).abs())
        .collect();
    Ok(label.with_data(data)?)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}
