//! Detector back end used by the service.

use drscreen_core::dataset::{Dataset, IMAGE_EXTENSIONS};
use drscreen_core::detector::{detect, DetectorConfig, DetectorMode, OraclePerturbation};
use drscreen_core::Detection;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;

pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub enum Backend {
    /// Replays dataset annotations. Uploads are matched to dataset images by
    /// content hash, falling back to the uploaded file name.
    Oracle {
        config: DetectorConfig,
        perturbation: Option<OraclePerturbation>,
        by_hash: HashMap<String, String>,
        truth: BTreeMap<String, Vec<Detection>>,
    },
    External {
        config: DetectorConfig,
    },
}

impl Backend {
    pub fn oracle(config: DetectorConfig, perturbation: Option<OraclePerturbation>, dataset: &Dataset) -> std::io::Result<Self> {
        let mut by_hash = HashMap::new();
        for r in &dataset.records {
            if let Some(p) = dataset.image_path(&r.image_id) {
                by_hash.insert(content_hash(&std::fs::read(&p)?), r.image_id.clone());
            }
        }
        Ok(Backend::Oracle {
            config,
            perturbation,
            by_hash,
            truth: dataset.annotations.clone(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        match self {
            Backend::Oracle { config, .. } | Backend::External { config } => config,
        }
    }

    pub fn mode(&self) -> DetectorMode {
        self.config().mode
    }

    /// Runs detection on an uploaded image. `hash` is its content hash and
    /// `file_name` the client-supplied name, if any.
    pub fn run(&self, hash: &str, file_name: Option<&str>, bytes: &[u8], ext: &str) -> Result<Vec<Detection>, String> {
        match self {
            Backend::Oracle {
                config,
                perturbation,
                by_hash,
                truth,
            } => {
                let stem = file_name.map(|n| {
                    let n = n.rsplit(['/', '\\']).next().unwrap_or(n);
                    match n.rsplit_once('.') {
                        Some((s, e)) if IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()) => s,
                        _ => n,
                    }
                });
                let id = by_hash
                    .get(hash)
                    .map(String::as_str)
                    .or(stem.filter(|s| truth.contains_key(*s)))
                    .ok_or_else(|| "oracle detector has no ground truth for this image".to_string())?;
                detect(id, None, config, Some(&truth[id]), perturbation.as_ref()).map_err(|e| e.to_string())
            }
            Backend::External { config } => {
                let mut tmp = tempfile::Builder::new()
                    .suffix(&format!(".{ext}"))
                    .tempfile()
                    .map_err(|e| format!("temporary file: {e}"))?;
                tmp.write_all(bytes).map_err(|e| format!("temporary file: {e}"))?;
                detect(&hash[..16], Some(tmp.path()), config, None, None).map_err(|e| e.to_string())
            }
        }
    }
}
