//! HTTP service: predict on uploaded fundus images, expose model metadata
//! and record clinician triage decisions.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/v1/predict` | multipart upload, field `image` (PNG or JPEG) |
//! | GET | `/api/v1/model` | model metadata |
//! | POST | `/api/v1/triage` | store a clinician decision |
//! | GET | `/api/v1/triage?image_id=…` | decisions, newest first |
//! | GET | `/api/v1/images/{image_id}` | a stored upload |
//! | GET | `/healthz` | `ok` |
//!
//! Errors are JSON objects `{"error": "...", "diagnostic_id"?: "..."}`.

mod api;
mod backend;
mod store;
mod triage;

pub use api::{router, CountsMap, DetectionOut, ModelInfo, PredictResponse};
pub use backend::{content_hash, Backend};
pub use store::{ImageKind, ImageStore, DEFAULT_RETENTION};
pub use triage::{NewTriage, TriageLog, TriageRecord};

use drscreen_core::dataset::Dataset;
use drscreen_core::detector::{DetectorConfig, DetectorMode, OraclePerturbation};
use drscreen_core::features::{CountMode, FeatureSchema};
use drscreen_core::svm::{load_model, SvmModel};
use drscreen_core::LesionClass;
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::Mutex;

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("model: {0}")]
    Model(String),
    #[error("detector: {0}")]
    Detector(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// No model means predict and model endpoints answer 503.
    pub model_path: Option<PathBuf>,
    pub detector: DetectorConfig,
    pub perturbation: Option<OraclePerturbation>,
    /// Dataset whose annotations back the oracle detector.
    pub truth_dataset: Option<PathBuf>,
    pub max_upload: usize,
    /// Holds `images/` and `triage.jsonl`.
    pub data_dir: PathBuf,
    pub retention: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model_path: None,
            detector: DetectorConfig::oracle(),
            perturbation: None,
            truth_dataset: None,
            max_upload: DEFAULT_MAX_UPLOAD,
            data_dir: data_dir.into(),
            retention: DEFAULT_RETENTION,
        }
    }
}

pub struct LoadedModel {
    pub model: SvmModel,
    /// First 16 hex digits of the model file's SHA-256.
    pub version: String,
    pub schema: FeatureSchema,
}

impl LoadedModel {
    pub fn load(path: &std::path::Path) -> Result<Self, ServiceError> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::Model(format!("{}: {e}", path.display())))?;
        let model = load_model(path).map_err(|e| ServiceError::Model(e.to_string()))?;
        Self::new(model, &content_hash(&bytes)[..16])
    }

    pub fn new(model: SvmModel, version: &str) -> Result<Self, ServiceError> {
        let schema = match &model.features {
            Some(s) => s.clone(),
            None if model.preprocess.input_dim == LesionClass::COUNT => FeatureSchema {
                lesion_classes: LesionClass::ALL.to_vec(),
                count_mode: CountMode::Raw,
            },
            None => {
                return Err(ServiceError::Model(format!(
                    "model takes {} inputs but records no lesion-class schema",
                    model.preprocess.input_dim
                )))
            }
        };
        Ok(LoadedModel {
            model,
            version: version.to_string(),
            schema,
        })
    }
}

pub struct AppState {
    pub model: Option<LoadedModel>,
    pub backend: Backend,
    pub store: ImageStore,
    pub triage: TriageLog,
    pub max_upload: usize,
    /// Latest predicted grade per stored image, used when a triage post
    /// omits `predicted_grade`.
    pub predictions: Mutex<HashMap<String, drscreen_core::DrGrade>>,
    pub(crate) diagnostics: AtomicU64,
}

impl AppState {
    pub fn new(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let model = cfg.model_path.as_deref().map(LoadedModel::load).transpose()?;
        let backend = match cfg.detector.mode {
            DetectorMode::Oracle => {
                let path = cfg
                    .truth_dataset
                    .as_ref()
                    .ok_or_else(|| ServiceError::Detector("oracle detector needs a truth dataset".into()))?;
                let ds = Dataset::load(path).map_err(|e| ServiceError::Detector(e.to_string()))?;
                Backend::oracle(cfg.detector.clone(), cfg.perturbation, &ds)?
            }
            DetectorMode::External => {
                cfg.detector.validate().map_err(|e| ServiceError::Detector(e.to_string()))?;
                Backend::External {
                    config: cfg.detector.clone(),
                }
            }
        };
        Self::from_parts(model, backend, cfg)
    }

    /// Assembles state from an already loaded model and back end.
    pub fn from_parts(model: Option<LoadedModel>, backend: Backend, cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&cfg.data_dir)?;
        Ok(AppState {
            model,
            backend,
            store: ImageStore::open(&cfg.data_dir.join("images"), cfg.retention)?,
            triage: TriageLog::open(&cfg.data_dir.join("triage.jsonl"))?,
            max_upload: cfg.max_upload,
            predictions: Mutex::new(HashMap::new()),
            diagnostics: AtomicU64::new(0),
        })
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let state = std::sync::Arc::new(AppState::new(&cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
