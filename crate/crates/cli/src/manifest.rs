//! Run and pipeline manifests.
//!
//! Manifests hold no timestamps, thread counts or absolute paths, so two
//! runs with the same inputs produce byte-identical manifests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use uqcat_core::predictor::TrainReport;
use uqcat_core::uq::{CaseSpec, PassDraw};

use crate::config::PipelineConfig;

pub const TOOL: &str = "uqcat";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: u8,
    pub passes: Vec<PassDraw>,
    /// File name to sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject: usize,
    pub image: String,
    pub image_sha256: String,
    /// Seed handed to the sampling engine for this subject.
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub manifest_version: u32,
    pub model_sha256: String,
    pub seed: u64,
    pub samples: usize,
    pub binarize: bool,
    pub cases: Vec<CaseSpec>,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub phantom_train: u64,
    pub phantom_test: u64,
    pub init: u64,
    pub train: u64,
    pub run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    /// False when the model was supplied with `--model`.
    pub trained: bool,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool: String,
    pub version: String,
    pub manifest_version: u32,
    /// Fully resolved configuration (file, then flags, over defaults).
    pub config: PipelineConfig,
    pub seeds: StageSeeds,
    pub model: ModelRecord,
    /// Relative path to sha256 for every file in the output tree.
    pub outputs: BTreeMap<String, String>,
}
