//! Model file: a single pretty-printed JSON document.
//!
//! Top-level fields: `schema_version` (currently 1), `classes` (grade ids),
//! `pairwise` (`positive`, `negative`, `machine` with `support_vectors`,
//! `dual_coefs`, `bias`, `kernel` {`kind`, `gamma`}, `c`), `preprocess`
//! (`input_dim`, `selected_indices`, `scaler`, `pca`, `variance_floor`),
//! optional `features` (`lesion_classes`, `count_mode`) and `metadata`.
//! Floats are written in shortest round-trip form and parsed with
//! correct rounding, so a reloaded model reproduces every decision value
//! bit for bit.

use super::multiclass::{SvmModel, MODEL_SCHEMA_VERSION};
use super::SvmError;
use std::path::Path;

pub fn model_to_string(model: &SvmModel) -> String {
    let mut s = serde_json::to_string_pretty(model).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_str(text: &str) -> Result<SvmModel, SvmError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| SvmError::Load(format!("not a model document: {e}")))?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| SvmError::Load("missing field `schema_version`".into()))?
        .as_u64()
        .ok_or_else(|| SvmError::Load("field `schema_version` is not an unsigned integer".into()))?;
    if version != MODEL_SCHEMA_VERSION as u64 {
        return Err(SvmError::UnsupportedVersion(version));
    }
    let model: SvmModel = serde_json::from_value(value).map_err(|e| SvmError::Load(e.to_string()))?;
    validate(&model)?;
    Ok(model)
}

fn validate(m: &SvmModel) -> Result<(), SvmError> {
    let bad = |field: &str, why: String| SvmError::Load(format!("field `{field}`: {why}"));
    let n = m.classes.len();
    if n < 2 {
        return Err(bad("classes", format!("need at least 2 classes, found {n}")));
    }
    if m.pairwise.len() != n * (n - 1) / 2 {
        return Err(bad(
            "pairwise",
            format!("expected {} machines for {n} classes, found {}", n * (n - 1) / 2, m.pairwise.len()),
        ));
    }
    let dim = m.preprocess.output_dim();
    for p in &m.pairwise {
        if !m.classes.contains(&p.positive) || !m.classes.contains(&p.negative) {
            return Err(bad("pairwise", format!("machine for unknown pair {}/{}", p.positive, p.negative)));
        }
        if p.machine.support_vectors.len() != p.machine.dual_coefs.len() {
            return Err(bad("dual_coefs", "length differs from support_vectors".into()));
        }
        if p.machine.support_vectors.iter().any(|sv| sv.len() != dim) {
            return Err(bad("support_vectors", format!("vectors must have dimension {dim}")));
        }
        p.machine.kernel.validate().map_err(|e| bad("kernel", e.to_string()))?;
    }
    if let Some(f) = &m.features {
        if f.lesion_classes.len() != m.preprocess.input_dim {
            return Err(bad(
                "features",
                format!("{} lesion classes for input_dim {}", f.lesion_classes.len(), m.preprocess.input_dim),
            ));
        }
    }
    if m.preprocess.selected_indices.iter().any(|&i| i >= m.preprocess.input_dim) {
        return Err(bad("selected_indices", "index beyond input_dim".into()));
    }
    Ok(())
}

pub fn save_model(model: &SvmModel, path: &Path) -> Result<(), SvmError> {
    std::fs::write(path, model_to_string(model)).map_err(|e| SvmError::Io(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<SvmModel, SvmError> {
    let text = std::fs::read_to_string(path).map_err(|e| SvmError::Io(format!("{}: {e}", path.display())))?;
    model_from_str(&text)
}
