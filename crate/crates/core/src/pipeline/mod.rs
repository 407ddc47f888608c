//! End-to-end training run.
//!
//! Stages run in a fixed order: load → detect → featurize → split →
//! preprocess → train (grid search + final fit) → evaluate → persist.
//! Everything fitted (preprocessing, grid search, final model) sees the
//! training split only.
//!
//! Artifacts written to the output directory:
//!
//! | file | contents |
//! |---|---|
//! | `artifacts.json` | layout version and file list |
//! | `run_config.json` | the configuration snapshot |
//! | `counts.csv` | per-image lesion counts and grade |
//! | `report_detection.{json,txt}` | detector vs ground truth, when truth exists |
//! | `cv_table.csv` | cross-validation accuracy per grid point |
//! | `model.svm` | the trained model |
//! | `report_train.{json,txt}`, `report_test.{json,txt}` | classification reports |

mod counts;
mod grid;
mod report;

pub use counts::{CountRow, CountTable};
pub use grid::{cv_table_csv, grid_search, stratified_folds, CvRow, Gamma, GridPoint, KernelKind, SolverSettings, SvmGrid};
pub use report::{evaluate, report_from_confusion, report_from_predictions, BinarizedView, EvalReport, GradeMetrics};

use crate::dataset::{split_indices, Dataset, SplitSpec};
use crate::detector::{detect_dataset, DetectorConfig, OraclePerturbation};
use crate::deteval::{detection_metrics, match_detections, MatchResult, DEFAULT_IOU_THRESHOLD};
use crate::domain::{Detection, DrGrade, LesionClass};
use crate::features::{extract_counts, fit_preprocess, CountMode, FeatureSchema, PreprocessConfig, PreprocessParams};
use crate::svm::{save_model, train_multiclass, SvmModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const ARTIFACT_LAYOUT_VERSION: u32 = 1;
pub const COUNTS_FILE: &str = "counts.csv";
pub const MODEL_FILE: &str = "model.svm";
pub const CV_TABLE_FILE: &str = "cv_table.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Detect,
    Featurize,
    Split,
    Preprocess,
    Train,
    Evaluate,
    Persist,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {message}")]
pub struct RunError {
    pub stage: Stage,
    pub message: String,
}

impl RunError {
    fn at(stage: Stage) -> impl FnOnce(&dyn std::fmt::Display) -> RunError {
        move |e| RunError {
            stage,
            message: e.to_string(),
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, RunError>;
}

impl<T, E: std::fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, RunError> {
        self.map_err(|e| RunError::at(stage)(&e))
    }
}

fn default_folds() -> usize {
    5
}
fn default_seed() -> u64 {
    42
}
fn yes() -> bool {
    true
}
fn default_detector() -> DetectorConfig {
    DetectorConfig::oracle()
}

/// Training-run configuration (JSON).
///
/// `seed` drives the SMO pair machines and the CV fold assignment; the
/// train/test partition uses `split.seed`. The CLI sets both from `--seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_detector")]
    pub detector: DetectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<OraclePerturbation>,
    #[serde(default)]
    pub count_mode: CountMode,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub grid: SvmGrid,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub solver: SolverLimits,
    /// Stamp the model with its creation time. Off for byte-reproducible runs.
    #[serde(default = "yes")]
    pub timestamps: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverLimits {
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SolverLimits {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverLimits {
            tol: s.tol,
            max_passes: s.max_passes,
        }
    }
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            detector: default_detector(),
            perturbation: None,
            count_mode: CountMode::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitSpec::default(),
            grid: SvmGrid::default(),
            cv_folds: default_folds(),
            seed: default_seed(),
            output_dir: output_dir.into(),
            solver: SolverLimits::default(),
            timestamps: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError {
            stage: Stage::Config,
            message: format!("{}: {e}", path.display()),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| RunError {
            stage: Stage::Config,
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let fail = |m: String| Err(RunError { stage: Stage::Config, message: m });
        if self.cv_folds < 2 {
            return fail(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        self.grid.validate().at(Stage::Config)?;
        self.split.validate().at(Stage::Config)?;
        self.detector.validate().at(Stage::Config)?;
        if let Some(p) = &self.perturbation {
            p.validate().at(Stage::Config)?;
        }
        if !(self.solver.tol > 0.0) {
            return fail(format!("solver tol must be positive, got {}", self.solver.tol));
        }
        Ok(())
    }

    fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.solver.tol,
            max_passes: self.solver.max_passes,
            seed: self.seed,
        }
    }
}

/// Result of fitting on a count table.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SvmModel,
    pub best: GridPoint,
    pub cv_table: Vec<CvRow>,
    pub train_report: EvalReport,
    pub test_report: EvalReport,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub train: TrainOutcome,
    pub counts: CountTable,
    pub detection_report: Option<crate::deteval::DetectionReport>,
    pub artifacts_dir: PathBuf,
}

/// Lesion classes counted by a run: the detector's subset, in taxonomy order,
/// restricted to the dataset's subset.
pub fn active_classes(dataset: &[LesionClass], detector: &[LesionClass]) -> Vec<LesionClass> {
    LesionClass::ALL
        .into_iter()
        .filter(|c| dataset.contains(c) && detector.contains(c))
        .collect()
}

/// Builds the count table for `records`, in record order.
pub fn featurize(
    dataset: &Dataset,
    detections: &BTreeMap<String, Vec<Detection>>,
    classes: &[LesionClass],
    mode: CountMode,
) -> CountTable {
    let rows = dataset
        .records
        .iter()
        .map(|r| {
            let dets = detections.get(&r.image_id).map(Vec::as_slice).unwrap_or(&[]);
            let (fv, _) = extract_counts(&r.image_id, dets, classes, mode);
            CountRow {
                image_id: r.image_id.clone(),
                values: fv.values,
                grade: r.grade,
            }
        })
        .collect();
    CountTable {
        classes: classes.to_vec(),
        rows,
    }
}

/// Fitted preprocessing and grid-search winner for a training split. Split
/// out so leakage checks can call it on the training rows alone.
pub fn fit_on_training(
    x: &[Vec<f64>],
    y: &[DrGrade],
    cfg: &RunConfig,
) -> Result<(PreprocessParams, GridPoint, Vec<CvRow>), RunError> {
    let labels: Vec<usize> = y.iter().map(|g| g.id()).collect();
    let params = fit_preprocess(x, &labels, &cfg.preprocess).at(Stage::Preprocess)?;
    let xp = params.transform_all(x).at(Stage::Preprocess)?;
    let distinct = {
        let mut g = y.to_vec();
        g.sort();
        g.dedup();
        g.len()
    };
    if distinct < 2 {
        return Err(RunError {
            stage: Stage::Train,
            message: format!("training split has {distinct} distinct grade(s); at least two are needed"),
        });
    }
    let (best, rows) = grid_search(&xp, y, &cfg.grid, cfg.cv_folds, &cfg.solver_settings()).at(Stage::Train)?;
    Ok((params, best, rows))
}

/// Split, preprocess, grid-search, fit and evaluate on a count table.
pub fn train_from_counts(table: &CountTable, cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    let grades = table.grades();
    let (train_idx, test_idx) = split_indices(&grades, &cfg.split).at(Stage::Split)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<DrGrade>, Vec<String>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for &i in idx {
            x.push(table.rows[i].values.clone());
            y.push(table.rows[i].grade);
            ids.push(table.rows[i].image_id.clone());
        }
        (x, y, ids)
    };
    let (x_train, y_train, train_ids) = pick(&train_idx);
    let (x_test, y_test, test_ids) = pick(&test_idx);

    let (params, best, cv_table) = fit_on_training(&x_train, &y_train, cfg)?;
    let xp = params.transform_all(&x_train).at(Stage::Train)?;
    let train_cfg = best.train_config(&xp, &cfg.solver_settings());
    let mut model = train_multiclass(&xp, &y_train, &train_cfg).at(Stage::Train)?.with_preprocess(params);
    model.features = Some(FeatureSchema {
        lesion_classes: table.classes.clone(),
        count_mode: cfg.count_mode,
    });
    model.metadata.created_at = cfg
        .timestamps
        .then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let best_cv = cv_table
        .iter()
        .find(|r| r.point == best)
        .map_or(0.0, |r| r.mean_accuracy);
    model.metadata.training_summary = Some(serde_json::json!({ "n_train": x_train.len() }));

    let train_report = evaluate(&model, &x_train, &y_train).at(Stage::Evaluate)?;
    let test_report = evaluate(&model, &x_test, &y_test).at(Stage::Evaluate)?;
    model.metadata.training_summary = Some(serde_json::json!({
        "n_train": x_train.len(),
        "n_test": x_test.len(),
        "grid_point": best,
        "cv_mean_accuracy": best_cv,
        "train_accuracy": train_report.accuracy,
        "test_accuracy": test_report.accuracy,
        "test_macro_f1": test_report.macro_f1,
        "test_referable_accuracy": test_report.binarized.accuracy,
    }));
    Ok(TrainOutcome {
        model,
        best,
        cv_table,
        train_report,
        test_report,
        train_ids,
        test_ids,
    })
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| RunError {
        stage: Stage::Persist,
        message: format!("{}: {e}", p.display()),
    })
}

fn json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn start_run(cfg: &RunConfig) -> Result<(PathBuf, Vec<&'static str>), RunError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).at(Stage::Persist)?;
    write(&dir, RUN_CONFIG_FILE, json(cfg))?;
    Ok((dir, vec![RUN_CONFIG_FILE]))
}

fn finish_run(dir: &Path, mut files: Vec<&'static str>, counts: &CountTable, cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    write(dir, COUNTS_FILE, counts.to_csv())?;
    files.push(COUNTS_FILE);

    let train = train_from_counts(counts, cfg)?;
    write(dir, CV_TABLE_FILE, cv_table_csv(&train.cv_table))?;
    save_model(&train.model, &dir.join(MODEL_FILE)).at(Stage::Persist)?;
    write(dir, "report_train.json", json(&train.train_report))?;
    write(dir, "report_train.txt", train.train_report.to_text("training split"))?;
    write(dir, "report_test.json", json(&train.test_report))?;
    write(dir, "report_test.txt", train.test_report.to_text("test split"))?;
    files.extend([
        CV_TABLE_FILE,
        MODEL_FILE,
        "report_train.json",
        "report_train.txt",
        "report_test.json",
        "report_test.txt",
    ]);
    files.push("artifacts.json");
    write(
        dir,
        "artifacts.json",
        json(&serde_json::json!({ "layout_version": ARTIFACT_LAYOUT_VERSION, "files": files })),
    )?;
    log::info!(
        "run finished: test accuracy {:.4}, macro-F1 {:.4}",
        train.test_report.accuracy,
        train.test_report.macro_f1
    );
    Ok(train)
}

/// Runs every stage and persists artifacts. On failure, whatever was
/// already written stays in place.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let (dir, mut files) = start_run(cfg)?;

    let dataset = Dataset::load(&cfg.dataset).at(Stage::Load)?;
    let detections = detect_dataset(&dataset, &cfg.detector, cfg.perturbation.as_ref(), None).at(Stage::Detect)?;
    let detection_report = score_detections(&dataset, &detections);
    if let Some(r) = &detection_report {
        write(&dir, "report_detection.json", json(r))?;
        write(&dir, "report_detection.txt", r.to_text())?;
        files.extend(["report_detection.json", "report_detection.txt"]);
    }

    let classes = active_classes(&dataset.class_subset, &cfg.detector.class_subset);
    let counts = featurize(&dataset, &detections, &classes, cfg.count_mode);
    let train = finish_run(&dir, files, &counts, cfg)?;
    Ok(RunOutcome {
        train,
        counts,
        detection_report,
        artifacts_dir: dir,
    })
}

/// Like [`run_training`] but starts from an existing count table; the
/// dataset and detector settings in `cfg` are ignored.
pub fn run_training_on_counts(cfg: &RunConfig, counts: &CountTable) -> Result<TrainOutcome, RunError> {
    let (dir, files) = start_run(cfg)?;
    finish_run(&dir, files, counts, cfg)
}

/// Scores detections against every image that has ground truth; `None`
/// when no image does.
pub fn score_detections(
    dataset: &Dataset,
    detections: &BTreeMap<String, Vec<Detection>>,
) -> Option<crate::deteval::DetectionReport> {
    let mut total = MatchResult::default();
    let mut any = false;
    for r in &dataset.records {
        if let Some(truth) = dataset.annotations.get(&r.image_id) {
            let dets = detections.get(&r.image_id).map(Vec::as_slice).unwrap_or(&[]);
            total.merge(&match_detections(dets, truth, DEFAULT_IOU_THRESHOLD));
            any = true;
        }
    }
    any.then(|| detection_metrics(&total, DEFAULT_IOU_THRESHOLD))
}
