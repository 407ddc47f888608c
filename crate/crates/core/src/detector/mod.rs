//! Lesion detector boundary.
//!
//! Two interchangeable back ends produce [`Detection`]s for an image: an
//! external process that exchanges files (see [`external`]) and an oracle
//! that replays ground truth with controlled errors (see [`oracle`]). The
//! module also prepares training bundles for the external tool.

mod augment;
mod bundle;
pub mod external;
mod oracle;

pub use augment::{augment_image, crop_rect, AugmentOp, MIN_KEPT_AREA};
pub use bundle::{prepare_training_bundle, BundleOptions, BUNDLE_MANIFEST};
pub use external::{parse_detection_output, run_external};
pub use oracle::{oracle_detect, OraclePerturbation};

use crate::dataset::{Dataset, DatasetError};
use crate::domain::{Detection, LesionClass};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("detector config: {0}")]
    Config(String),
    #[error("no ground truth for image {0}; the oracle detector needs annotations")]
    MissingTruth(String),
    #[error("image file for {0} not found")]
    MissingImage(String),
    #[error("could not start `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{command}` exited with {status}; stderr: {stderr}")]
    External {
        command: String,
        status: String,
        stdout: String,
        stderr: String,
    },
    #[error("detector output: {0}")]
    Output(DatasetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    External,
    Oracle,
}

/// Detector selection plus the post-filter applied to every result.
///
/// `external_command` is an argv template; `{input_dir}`, `{output_dir}` and
/// `{conf}` are substituted in each argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    #[serde(default)]
    pub external_command: Vec<String>,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "all_classes")]
    pub class_subset: Vec<LesionClass>,
}

fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

fn all_classes() -> Vec<LesionClass> {
    LesionClass::ALL.to_vec()
}

impl DetectorConfig {
    pub fn oracle() -> Self {
        DetectorConfig {
            mode: DetectorMode::Oracle,
            external_command: Vec::new(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            class_subset: all_classes(),
        }
    }

    pub fn external(command: Vec<String>) -> Self {
        DetectorConfig {
            mode: DetectorMode::External,
            external_command: command,
            ..Self::oracle()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(DetectorError::Config(format!(
                "confidence_threshold {} outside [0,1]",
                self.confidence_threshold
            )));
        }
        if self.mode == DetectorMode::External && self.external_command.is_empty() {
            return Err(DetectorError::Config("external mode needs a non-empty command".into()));
        }
        if self.class_subset.is_empty() {
            return Err(DetectorError::Config("class_subset is empty".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let cfg: DetectorConfig = serde_json::from_str(&text)
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keeps detections at or above the threshold whose class is active.
    pub fn filter(&self, detections: Vec<Detection>) -> Vec<Detection> {
        detections
            .into_iter()
            .filter(|d| d.confidence >= self.confidence_threshold && self.class_subset.contains(&d.lesion_class))
            .collect()
    }
}

/// Detects lesions in one image. The oracle needs `truth`; the external
/// tool needs `image`.
pub fn detect(
    image_id: &str,
    image: Option<&Path>,
    config: &DetectorConfig,
    truth: Option<&[Detection]>,
    perturb: Option<&OraclePerturbation>,
) -> Result<Vec<Detection>, DetectorError> {
    config.validate()?;
    match config.mode {
        DetectorMode::Oracle => {
            let truth = truth.ok_or_else(|| DetectorError::MissingTruth(image_id.to_string()))?;
            let none = OraclePerturbation::default();
            Ok(config.filter(oracle_detect(image_id, truth, perturb.unwrap_or(&none), config)?))
        }
        DetectorMode::External => {
            let path = image.ok_or_else(|| DetectorError::MissingImage(image_id.to_string()))?;
            let mut out = run_external(config, &[(image_id.to_string(), path.to_path_buf())], None)?;
            Ok(out.remove(image_id).unwrap_or_default())
        }
    }
}

/// Runs the detector over the listed images of a dataset (all records when
/// `ids` is `None`). The external tool is invoked once for the whole batch.
pub fn detect_dataset(
    dataset: &Dataset,
    config: &DetectorConfig,
    perturb: Option<&OraclePerturbation>,
    ids: Option<&[String]>,
) -> Result<BTreeMap<String, Vec<Detection>>, DetectorError> {
    config.validate()?;
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => dataset.records.iter().map(|r| r.image_id.clone()).collect(),
    };
    match config.mode {
        DetectorMode::Oracle => ids
            .iter()
            .map(|id| {
                let truth = dataset
                    .annotations
                    .get(id)
                    .ok_or_else(|| DetectorError::MissingTruth(id.clone()))?;
                Ok((id.clone(), detect(id, None, config, Some(truth), perturb)?))
            })
            .collect(),
        DetectorMode::External => {
            let images: Vec<(String, PathBuf)> = ids
                .iter()
                .map(|id| {
                    dataset
                        .image_path(id)
                        .map(|p| (id.clone(), p))
                        .ok_or_else(|| DetectorError::MissingImage(id.clone()))
                })
                .collect::<Result<_, _>>()?;
            run_external(config, &images, None)
        }
    }
}
