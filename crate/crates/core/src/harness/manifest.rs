//! Run manifest: what was trained, from which image, with which settings.

use super::config::RunConfig;
use crate::erf_probe::ErfProfile;
use crate::error::{Error, Result};
use crate::orchestrator::StagePlan;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingImage {
    pub path: String,
    pub sha256: String,
    pub size: (usize, usize),
    pub base_resolution: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub done: bool,
    /// Paths relative to the run directory.
    pub checkpoint: Option<String>,
    pub report: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub training_image: TrainingImage,
    pub config: RunConfig,
    pub config_sha256: String,
    pub stages: Vec<StageStatus>,
    pub erf: Option<ErfProfile>,
    pub overlap: Option<usize>,
    pub stage_plan: Option<StagePlan>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Wall-clock data; the only non-deterministic content.
    pub timestamps: BTreeMap<String, u64>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(training_image: TrainingImage, config: RunConfig, stage_names: &[&str]) -> Self {
        let config_json = serde_json::to_string(&config).expect("config serialises");
        let config_sha256 = sha256_hex(config_json.as_bytes());
        let run_id = sha256_hex(format!("{}:{config_sha256}", training_image.sha256).as_bytes())[..16].to_string();
        Self {
            run_id,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            training_image,
            config,
            config_sha256,
            stages: stage_names
                .iter()
                .map(|n| StageStatus {
                    name: n.to_string(),
                    done: false,
                    checkpoint: None,
                    report: None,
                })
                .collect(),
            erf: None,
            overlap: None,
            stage_plan: None,
            metrics: BTreeMap::new(),
            timestamps: BTreeMap::from([("created".to_string(), unix_now())]),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageStatus> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_done(&self, name: &str) -> bool {
        self.stage(name).is_some_and(|s| s.done)
    }

    pub fn mark_done(&mut self, name: &str, checkpoint: Option<String>, report: Option<String>) {
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(s) => {
                s.done = true;
                s.checkpoint = checkpoint;
                s.report = report;
            }
            None => self.stages.push(StageStatus {
                name: name.to_string(),
                done: true,
                checkpoint,
                report,
            }),
        }
        self.timestamps.insert(format!("{name}_done"), unix_now());
    }

    pub fn referenced_files(&self) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| s.checkpoint.iter().chain(s.report.iter()).cloned())
            .collect()
    }

    /// Copy with wall-clock data removed, for determinism checks.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.timestamps.clear();
        m
    }

    /// Writes `manifest.json` after checking every referenced file exists.
    pub fn save(&mut self, run_dir: &Path) -> Result<PathBuf> {
        for f in self.referenced_files() {
            let p = run_dir.join(&f);
            if !p.is_file() {
                return Err(Error::invalid("harness", format!("manifest references missing file {}", p.display())));
            }
        }
        self.timestamps.insert("written".into(), unix_now());
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join("manifest.json.tmp");
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, s).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Accepts a manifest file or its run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let s = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}
