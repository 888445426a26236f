//! Experiment configuration files and fingerprinting.
//!
//! A config is one TOML document with `[data]`, `[segmenter]`, `[run]`
//! and (for sweeps) `[sweep]` tables. Unknown keys anywhere are errors.
//! The fingerprint hashes the parsed configuration in canonical form, so
//! key order and whitespace do not matter but every value does.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppsam_core::finetune::RunConfig;
use ppsam_core::segmenter::SegmenterSpec;
use ppsam_core::sweep::{ExperimentKind, SweepMode, SweepSpec};

use crate::CliError;

/// Where checkpoint-selection scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Validation carved from the training pool before k-shot sampling.
    #[default]
    CarvedValidation,
    /// Reproduction mode: select on the test split directly.
    TestSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root; falls back to `--data` / `PPSAM_DATA`.
    pub root: Option<PathBuf>,
    pub train_dataset: Option<String>,
    /// JSON split file `{"train": [...], "test": [...]}`.
    pub split_file: Option<PathBuf>,
    pub selection: SelectionMode,
    pub validation_fraction: f64,
    pub validation_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            train_dataset: None,
            split_file: None,
            selection: SelectionMode::default(),
            validation_fraction: 0.1,
            validation_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub levels: Vec<u32>,
    pub test_sets: Vec<String>,
    pub runs: Vec<u64>,
    pub mode: SweepMode,
    /// When set, expand the full experiment grid of this report kind
    /// instead of running the single `[run]` config.
    pub kind: Option<ExperimentKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let spec = SweepSpec::default();
        Self {
            levels: spec.levels,
            test_sets: spec.test_sets,
            runs: spec.runs,
            mode: SweepMode::FineTune,
            kind: None,
        }
    }
}

impl SweepSection {
    pub fn spec(&self) -> SweepSpec {
        SweepSpec {
            levels: self.levels.clone(),
            test_sets: self.test_sets.clone(),
            runs: self.runs.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment_id: Option<String>,
    pub data: DataSection,
    pub segmenter: Option<SegmenterSpec>,
    pub run: RunConfig,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            message: format!("cannot read config `{}`: {e}", path.display()),
        })?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config {
                message: format!("config `{}`: {e}", path.display()),
            })?;
        config.reconcile()?;
        Ok(config)
    }

    /// Cross-field defaults: the model input resolution and the training
    /// preparation resolution must be one number.
    fn reconcile(&mut self) -> Result<(), CliError> {
        let default_run_resolution = RunConfig::default().input_resolution;
        let segmenter = self.segmenter.get_or_insert_with(|| SegmenterSpec {
            backend: ppsam_core::segmenter::BackendKind::Surrogate,
            variant: "B".into(),
            input_resolution: None,
            checkpoint: None,
            runner: None,
            init_seed: 0,
        });
        match segmenter.input_resolution {
            Some(model_res) => {
                if self.run.input_resolution == default_run_resolution {
                    self.run.input_resolution = model_res;
                } else if self.run.input_resolution != model_res {
                    return Err(CliError::Config {
                        message: format!(
                            "input_resolution: segmenter says {model_res}, run says {}",
                            self.run.input_resolution
                        ),
                    });
                }
            }
            None => {
                segmenter.input_resolution = Some(self.run.input_resolution);
            }
        }
        self.run.validate().map_err(|e| CliError::Config {
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn segmenter_spec(&self) -> &SegmenterSpec {
        self.segmenter.as_ref().expect("reconcile ran at load")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn train_dataset(&self) -> Result<&str, CliError> {
        self.data
            .train_dataset
            .as_deref()
            .ok_or_else(|| CliError::Config {
                message: "data.train_dataset is required for this command".into(),
            })
    }
}

/// Canonical JSON: object keys sorted, no whitespace. Stable regardless
/// of serializer map ordering.
fn canonical_json(value: &serde_json::Value, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{}:", serde_json::Value::String((*key).clone())).unwrap();
                canonical_json(&map[*key], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(item, out);
            }
            out.push(']');
        }
        other => write!(out, "{other}").unwrap(),
    }
}

/// SHA-256 over the canonical JSON form of any serializable value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("config serialization");
    let mut canonical = String::new();
    canonical_json(&json, &mut canonical);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
