//! Pipeline configuration file.
//!
//! Every section and field is optional; missing values take their defaults.
//! A missing `train` section means "no training", which requires a model
//! to be supplied with `--model`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uqcat_core::phantom::PhantomSpec;
use uqcat_core::predictor::{PredictorConfig, TrainConfig};
use uqcat_core::uq::DEFAULT_SAMPLES;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed; every stage seed is derived from it.
    pub seed: u64,
    pub phantom: PhantomSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    pub run: RunSection,
    pub analyze: AnalyzeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            phantom: PhantomSection::default(),
            train: Some(TrainSection::default()),
            run: RunSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            train_subjects: 8,
            test_subjects: 8,
            spec: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: PredictorConfig,
    pub fit: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Case ids, e.g. `"1-14"` or `"1,6,13"`.
    pub cases: String,
    pub samples: usize,
    pub binarize: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            cases: "1-14".into(),
            samples: DEFAULT_SAMPLES,
            binarize: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Average correlation matrices in Fisher-z space.
    pub fisher_z: bool,
}

pub fn parse_config(text: &str, origin: &str) -> Result<PipelineConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default_without_training() {
        let c = parse_config("{}", "x").unwrap();
        assert_eq!(c.train, None);
        assert_eq!(c.run, RunSection::default());
        assert_eq!(c.phantom.train_subjects, 8);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = parse_config(
            r#"{"seed": 4, "train": {"fit": {"epochs": 3}}, "run": {"samples": 5}}"#,
            "x",
        )
        .unwrap();
        let t = c.train.unwrap();
        assert_eq!(t.fit.epochs, 3);
        assert_eq!(t.fit.lr, 0.001);
        assert_eq!(t.model, PredictorConfig::default());
        assert_eq!(c.run.samples, 5);
        assert_eq!(c.run.cases, "1-14");
    }

    #[test]
    fn errors_carry_location() {
        let err = parse_config("{\n  \"seed\": 1,\n  \"run\": {\"samples\": }\n}", "cfg.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("cfg.json:3:"), "{msg}");
        assert!(matches!(parse_config(r#"{"sed": 1}"#, "x"), Err(CliError::Usage(_))));
    }

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&text, "x").unwrap(), c);
    }
}
