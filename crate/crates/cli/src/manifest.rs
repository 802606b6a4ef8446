use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sphereflow::density::EvalReport;
use sphereflow::trainer::TrainConfig;
use sphereflow::{FlowError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Run description written next to the training artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
    pub resumed_from: Option<PathBuf>,
    pub epochs_completed: usize,
    /// SHA-256 over a git-style blob of the little-endian parameter bytes.
    pub params_hash: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub final_eval: Option<EvalReport>,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// `sha256("blob <len>\0" ++ bytes)` as lowercase hex.
pub fn params_hash(params: &[f64]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    hex::encode(h.finalize())
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
