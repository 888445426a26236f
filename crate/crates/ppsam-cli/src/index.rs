//! The experiment index: one JSON line per completed run under the
//! output root. Appends are single writes, so concurrent processes
//! targeting distinct experiment ids stay line-atomic.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const INDEX_FILE: &str = "experiments.jsonl";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Artifacts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: String,
    pub config_fingerprint: String,
    pub command: String,
    pub artifacts: Artifacts,
    pub created_at: String,
}

impl ExperimentRecord {
    /// All recorded artifact paths exist on disk.
    pub fn artifacts_present(&self) -> bool {
        [
            self.artifacts.checkpoint.as_ref(),
            self.artifacts.log.as_ref(),
            self.artifacts.curves.as_ref(),
        ]
        .into_iter()
        .flatten()
        .all(|p| p.exists())
    }
}

pub fn index_path(out_root: &Path) -> PathBuf {
    out_root.join(INDEX_FILE)
}

pub fn append(out_root: &Path, record: &ExperimentRecord) -> Result<(), CliError> {
    fs::create_dir_all(out_root).map_err(|e| CliError::io(out_root, e))?;
    let path = index_path(out_root);
    let mut line = serde_json::to_string(record).expect("record serialization");
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    file.write_all(line.as_bytes())
        .map_err(|e| CliError::io(&path, e))
}

pub fn load(out_root: &Path) -> Result<Vec<ExperimentRecord>, CliError> {
    let path = index_path(out_root);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|e| CliError::Config {
            message: format!("corrupt index line in `{}`: {e}", path.display()),
        })?);
    }
    Ok(records)
}

/// Latest record for an id, if any.
pub fn find(out_root: &Path, experiment_id: &str) -> Result<Option<ExperimentRecord>, CliError> {
    Ok(load(out_root)?
        .into_iter()
        .rev()
        .find(|r| r.experiment_id == experiment_id))
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_find_latest() {
        let tmp = tempfile::tempdir().unwrap();
        let record = |fp: &str| ExperimentRecord {
            experiment_id: "exp-a".into(),
            config_fingerprint: fp.into(),
            command: "finetune".into(),
            artifacts: Artifacts::default(),
            created_at: timestamp(),
        };
        append(tmp.path(), &record("111")).unwrap();
        append(tmp.path(), &record("222")).unwrap();
        let found = find(tmp.path(), "exp-a").unwrap().unwrap();
        assert_eq!(found.config_fingerprint, "222");
        assert!(find(tmp.path(), "missing").unwrap().is_none());
        assert_eq!(load(tmp.path()).unwrap().len(), 2);
    }
}
