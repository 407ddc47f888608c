//! Route handlers and wire types.

use crate::store::ImageKind;
use crate::triage::NewTriage;
use crate::{backend::content_hash, AppState};
use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use drscreen_core::features::extract_counts;
use drscreen_core::features::CountMode;
use drscreen_core::reference::{ClassifierReference, CLASSIFIER_REFERENCE};
use drscreen_core::{grade_from_int, BBox, Detection, DrGrade, LesionClass};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

/// Slack on top of `max_upload` for multipart framing.
const MULTIPART_OVERHEAD: usize = 64 * 1024;

pub type CountsMap = BTreeMap<String, usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOut {
    /// Class name, e.g. `MICROANEURYSM`.
    pub lesion_class: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

impl From<&Detection> for DetectionOut {
    fn from(d: &Detection) -> Self {
        DetectionOut {
            lesion_class: d.lesion_class.name().to_string(),
            class_id: d.lesion_class.id(),
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// Server-assigned content-hash id.
    pub image_id: String,
    pub detections: Vec<DetectionOut>,
    /// Detections per lesion class name, all seven classes listed.
    pub counts: CountsMap,
    pub grade: DrGrade,
    pub grade_label: String,
    pub referable: bool,
    /// Indexed by grade id.
    pub votes: [u32; DrGrade::COUNT],
    pub scores: [f64; DrGrade::COUNT],
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub schema_version: u32,
    pub model_version: String,
    pub classes: Vec<DrGrade>,
    pub class_labels: Vec<String>,
    pub kernel: String,
    pub gamma: Option<f64>,
    pub c: Option<f64>,
    pub lesion_classes: Vec<String>,
    pub count_mode: CountMode,
    pub created_at: Option<String>,
    pub training_summary: Option<Value>,
    pub detector_mode: drscreen_core::detector::DetectorMode,
    /// Published figures for the original setup; static annotations.
    pub reference: ClassifierReference,
}

/// Counts over the full taxonomy, keyed by class name.
pub fn counts_map(detections: &[Detection]) -> CountsMap {
    let (fv, _) = extract_counts("", detections, &LesionClass::ALL, CountMode::Raw);
    LesionClass::ALL
        .iter()
        .map(|c| (c.name().to_string(), fv.values[c.id()] as usize))
        .collect()
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn no_model() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded")
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload + MULTIPART_OVERHEAD;
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/api/v1/predict", post(predict).layer(DefaultBodyLimit::max(limit)))
        .route("/api/v1/model", get(model_info))
        .route("/api/v1/triage", post(post_triage).get(get_triage))
        .route("/api/v1/images/{image_id}", get(get_image))
        .with_state(state)
}

struct Upload {
    bytes: Bytes,
    file_name: Option<String>,
}

/// Picks the `image` field, or the first field carrying a file name.
async fn read_upload(mut mp: Multipart) -> Result<Option<Upload>, Response> {
    let mut fallback = None;
    loop {
        let field = match mp.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(error(e.status(), e.body_text())),
        };
        let is_image = field.name() == Some("image");
        let file_name = field.file_name().map(str::to_string);
        if !is_image && (file_name.is_none() || fallback.is_some()) {
            continue;
        }
        let bytes = field.bytes().await.map_err(|e| error(e.status(), e.body_text()))?;
        let upload = Upload { bytes, file_name };
        if is_image {
            return Ok(Some(upload));
        }
        fallback = Some(upload);
    }
    Ok(fallback)
}

async fn predict(State(st): State<Arc<AppState>>, mp: Result<Multipart, MultipartRejection>) -> Response {
    if st.model.is_none() {
        return no_model();
    }
    let mp = match mp {
        Ok(m) => m,
        Err(e) => return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("expected multipart/form-data: {e}")),
    };
    let upload = match read_upload(mp).await {
        Ok(Some(u)) => u,
        Ok(None) => return error(StatusCode::BAD_REQUEST, "no `image` field in the upload"),
        Err(r) => return r,
    };
    if upload.bytes.len() > st.max_upload {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload of {} bytes exceeds the {} byte limit", upload.bytes.len(), st.max_upload),
        );
    }
    if upload.bytes.is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty upload");
    }
    let Some(kind) = ImageKind::sniff(&upload.bytes) else {
        return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "only PNG and JPEG images are accepted");
    };

    let worker = st.clone();
    let result = tokio::task::spawn_blocking(move || run_prediction(&worker, &upload, kind)).await;
    match result {
        Ok(r) => r,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("prediction task failed: {e}")),
    }
}

fn run_prediction(st: &AppState, upload: &Upload, kind: ImageKind) -> Response {
    let loaded = st.model.as_ref().expect("checked by caller");
    let hash = content_hash(&upload.bytes);
    let image_id = hash[..32].to_string();
    if let Err(e) = st.store.put(&image_id, kind, &upload.bytes) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("storing image: {e}"));
    }
    let detections = match st
        .backend
        .run(&hash, upload.file_name.as_deref(), &upload.bytes, kind.extension())
    {
        Ok(d) => d,
        Err(diag) => {
            let n = st.diagnostics.fetch_add(1, Ordering::Relaxed);
            let id = format!("diag-{}-{n}", &image_id[..8]);
            log::error!("{id}: detector failed on {image_id}: {diag}");
            return (
                StatusCode::BAD_GATEWAY,
                Json(json!({ "error": format!("detector failed: {diag}"), "diagnostic_id": id })),
            )
                .into_response();
        }
    };
    let response = match loaded.respond(image_id.clone(), &detections) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("prediction failed: {e}")),
    };
    st.predictions
        .lock()
        .expect("predictions lock")
        .insert(image_id, response.grade);
    Json(response).into_response()
}

impl crate::LoadedModel {
    /// Grades one image from its detections.
    pub fn respond(&self, image_id: String, detections: &[Detection]) -> Result<PredictResponse, drscreen_core::svm::SvmError> {
        let (features, _) = extract_counts(&image_id, detections, &self.schema.lesion_classes, self.schema.count_mode);
        let prediction = self.model.predict_raw(&features.values)?;
        Ok(PredictResponse {
            counts: counts_map(detections),
            detections: detections.iter().map(DetectionOut::from).collect(),
            image_id,
            grade: prediction.grade,
            grade_label: prediction.grade.label().to_string(),
            referable: prediction.grade.is_referable(),
            votes: prediction.votes,
            scores: prediction.scores,
            model_version: self.version.clone(),
        })
    }
}

async fn model_info(State(st): State<Arc<AppState>>) -> Response {
    let Some(loaded) = &st.model else {
        return no_model();
    };
    let m = &loaded.model;
    let kernel = m.kernel();
    Json(ModelInfo {
        schema_version: m.schema_version,
        model_version: loaded.version.clone(),
        classes: m.classes.clone(),
        class_labels: m.classes.iter().map(|g| g.label().to_string()).collect(),
        kernel: kernel.map_or("none", |k| k.name()).to_string(),
        gamma: kernel.and_then(|k| k.gamma()),
        c: m.c(),
        lesion_classes: loaded.schema.lesion_classes.iter().map(|c| c.name().to_string()).collect(),
        count_mode: loaded.schema.count_mode,
        created_at: m.metadata.created_at.clone(),
        training_summary: m.metadata.training_summary.clone(),
        detector_mode: st.backend.mode(),
        reference: CLASSIFIER_REFERENCE,
    })
    .into_response()
}

fn grade_field(body: &Value, name: &str) -> Result<Option<DrGrade>, Response> {
    match body.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_i64()
            .and_then(|i| grade_from_int(i).ok())
            .map(Some)
            .ok_or_else(|| {
                error(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("`{name}` must be an integer grade 0-4, got {v}"),
                )
            }),
    }
}

fn string_field(body: &Value, name: &str) -> Result<Option<String>, Response> {
    match body.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(v) => Err(error(StatusCode::UNPROCESSABLE_ENTITY, format!("`{name}` must be a string, got {v}"))),
    }
}

/// Body: `{image_id, clinician_grade, reviewer_id, predicted_grade?, note?}`.
/// A missing `predicted_grade` is taken from the image's last prediction.
async fn post_triage(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: Value = match serde_json::from_slice(&body) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => return error(StatusCode::UNPROCESSABLE_ENTITY, "body must be a JSON object"),
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    let parsed = (|| {
        let image_id = string_field(&body, "image_id")?
            .ok_or_else(|| error(StatusCode::UNPROCESSABLE_ENTITY, "`image_id` is required"))?;
        let clinician = grade_field(&body, "clinician_grade")?
            .ok_or_else(|| error(StatusCode::UNPROCESSABLE_ENTITY, "`clinician_grade` is required"))?;
        let predicted = grade_field(&body, "predicted_grade")?;
        let reviewer = string_field(&body, "reviewer_id")?
            .filter(|s| !s.is_empty())
            .ok_or_else(|| error(StatusCode::UNPROCESSABLE_ENTITY, "`reviewer_id` is required"))?;
        let note = string_field(&body, "note")?.unwrap_or_default();
        Ok::<_, Response>((image_id, clinician, predicted, reviewer, note))
    })();
    let (image_id, clinician, predicted, reviewer, note) = match parsed {
        Ok(p) => p,
        Err(r) => return r,
    };
    if !st.store.contains(&image_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown image_id `{image_id}`"));
    }
    let predicted = match predicted.or_else(|| st.predictions.lock().expect("predictions lock").get(&image_id).copied()) {
        Some(p) => p,
        None => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                "`predicted_grade` is required for images not predicted by this server instance",
            )
        }
    };
    let worker = st.clone();
    let new = NewTriage {
        image_id,
        predicted_grade: predicted,
        clinician_grade: clinician,
        reviewer_id: reviewer,
        note,
    };
    match tokio::task::spawn_blocking(move || worker.triage.append(new)).await {
        Ok(Ok(record)) => (StatusCode::CREATED, Json(record)).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("triage log: {e}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("triage task failed: {e}")),
    }
}

#[derive(Deserialize)]
struct TriageQuery {
    image_id: Option<String>,
}

async fn get_triage(State(st): State<Arc<AppState>>, Query(q): Query<TriageQuery>) -> Response {
    Json(st.triage.list(q.image_id.as_deref())).into_response()
}

async fn get_image(State(st): State<Arc<AppState>>, Path(image_id): Path<String>) -> Response {
    match st.store.get(&image_id) {
        Some((kind, bytes)) => ([(header::CONTENT_TYPE, kind.mime())], bytes).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown image_id `{image_id}`")),
    }
}
