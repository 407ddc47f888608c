//! Dataset artifacts: label tables, annotation files, manifests, splits and
//! the synthetic generator.

mod annotation;
mod labels;
mod split;
pub mod synthetic;

pub use annotation::{format_annotations, parse_annotations, read_annotation_file, write_annotation_file};
pub use labels::{load_labels, write_labels};
pub use split::{split_indices, stratified_split, SplitSpec};
pub use synthetic::{generate_synthetic_dataset, grade_from_counts, write_synthetic_dataset, SynthConfig};

use crate::domain::{Detection, GradedRecord, LesionClass};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Labels {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: line {line}: {message}")]
    Annotation {
        path: PathBuf,
        image_id: String,
        line: usize,
        message: String,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("split: {0}")]
    Split(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("image: {0}")]
    Image(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// On-disk description of a dataset. Relative paths resolve against the
/// manifest's own directory.
///
/// ```json
/// {
///   "schema_version": 1,
///   "image_dir": "images",
///   "labels": "trainLabels.csv",
///   "annotation_dir": "labels",
///   "class_subset": [0, 1, 2, 3, 4, 5, 6]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_dir: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_dir: Option<PathBuf>,
    #[serde(default = "all_classes")]
    pub class_subset: Vec<LesionClass>,
}

fn all_classes() -> Vec<LesionClass> {
    LesionClass::ALL.to_vec()
}

impl Manifest {
    pub fn standard() -> Self {
        Manifest {
            schema_version: MANIFEST_VERSION,
            image_dir: "images".into(),
            labels: "trainLabels.csv".into(),
            annotation_dir: Some("labels".into()),
            class_subset: all_classes(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.schema_version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest {
                path: path.to_path_buf(),
                message: format!("unsupported schema_version {}", m.schema_version),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| DatasetError::io(path, e))
    }
}

/// Accepts a manifest file, a dataset directory, or a manifest path given
/// without its `.json` extension.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join(MANIFEST_FILE);
    }
    if !path.exists() {
        let with_ext = path.with_extension("json");
        if with_ext.exists() {
            return with_ext;
        }
    }
    path.to_path_buf()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<GradedRecord>,
    /// Ground truth per image; only images with an annotation file appear.
    pub annotations: BTreeMap<String, Vec<Detection>>,
    pub image_dir: PathBuf,
    pub class_subset: Vec<LesionClass>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self, DatasetError> {
        let manifest_path = resolve_manifest_path(manifest_path);
        let manifest = Manifest::load(&manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let records = load_labels(&root.join(&manifest.labels))?;
        let mut annotations = BTreeMap::new();
        if let Some(dir) = &manifest.annotation_dir {
            let dir = root.join(dir);
            for r in &records {
                let p = dir.join(format!("{}.txt", r.image_id));
                if p.exists() {
                    annotations.insert(r.image_id.clone(), read_annotation_file(&p, &r.image_id)?);
                }
            }
        }
        Ok(Dataset {
            records,
            annotations,
            image_dir: root.join(&manifest.image_dir),
            class_subset: manifest.class_subset,
        })
    }

    /// Locates the image file for `image_id` under the image directory.
    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.image_dir.join(format!("{image_id}.{ext}")))
            .find(|p| p.exists())
    }

    pub fn truth(&self, image_id: &str) -> &[Detection] {
        self.annotations.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }
}
