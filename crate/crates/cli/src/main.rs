//! `drscreen`: synthetic data, detection, features, training, evaluation,
//! prediction and serving from one binary.
//!
//! Usage errors exit 2; a failing step exits 1 with a one-line
//! `error: <stage> stage failed: <reason>` on stderr.

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use drscreen_core::dataset::{
    generate_synthetic_dataset, read_annotation_file, write_annotation_file, write_synthetic_dataset, Dataset,
    SynthConfig,
};
use drscreen_core::detector::{
    detect, detect_dataset, parse_detection_output, prepare_training_bundle, BundleOptions, DetectorConfig,
    DetectorMode, OraclePerturbation,
};
use drscreen_core::features::CountMode;
use drscreen_core::pipeline::{
    active_classes, evaluate, featurize, run_training, run_training_on_counts, score_detections, CountTable,
    RunConfig, RunError, Stage,
};
use drscreen_core::svm::load_model;
use drscreen_service::{content_hash, LoadedModel, ServiceConfig, DEFAULT_MAX_UPLOAD, DEFAULT_RETENTION};
use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "drscreen",
    version,
    about = "Diabetic retinopathy screening: lesion detection, count features and SVM grading"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random step [default: 42]
    #[arg(long, global = true, help_heading = "Global options", value_name = "N")]
    seed: Option<u64>,
    /// Run configuration (JSON); flags given on the command line win
    #[arg(long, global = true, help_heading = "Global options", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Leave creation timestamps out of artifacts
    #[arg(long, global = true, help_heading = "Global options")]
    no_timestamps: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic graded dataset with lesion annotations
    Synth(SynthArgs),
    /// Lay out a dataset for detector training
    Bundle(BundleArgs),
    /// Run the detector over a dataset and write one detection file per image
    Detect(DetectArgs),
    /// Write the per-image lesion count table
    Featurize(FeaturizeArgs),
    /// Detect, featurize, grid-search and fit a grading model
    Train(TrainArgs),
    /// Score a model against a count table
    Evaluate(EvaluateArgs),
    /// Grade a single image
    Predict(PredictArgs),
    /// Start the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Images per grade
    #[arg(long, default_value_t = 20, value_name = "N")]
    n_per_grade: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 256, value_name = "PX")]
    image_size: u32,
    /// Probability of replacing a record's grade with a different one
    #[arg(long, default_value_t = 0.0, value_name = "P")]
    label_flip_rate: f64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BundleArgs {
    /// Dataset manifest or directory
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Add flipped, rotated, cropped and noisy copies of training images
    #[arg(long)]
    augment: bool,
    /// Fraction of images held out for validation
    #[arg(long, default_value_t = 0.2, value_name = "F")]
    val_fraction: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CountModeArg {
    Raw,
    ConfidenceWeighted,
}

impl From<CountModeArg> for CountMode {
    fn from(m: CountModeArg) -> Self {
        match m {
            CountModeArg::Raw => CountMode::Raw,
            CountModeArg::ConfidenceWeighted => CountMode::ConfidenceWeighted,
        }
    }
}

#[derive(Debug, Args)]
struct DetectorArgs {
    /// Detector backend [default: oracle]
    #[arg(long, value_enum, value_name = "MODE")]
    detector: Option<ModeArg>,
    /// External detector command, split on whitespace; {input_dir}, {output_dir} and {conf} are substituted
    #[arg(long, value_name = "TEMPLATE")]
    detector_cmd: Option<String>,
    /// Detector configuration (JSON)
    #[arg(long, value_name = "PATH")]
    detector_config: Option<PathBuf>,
    /// Minimum detection confidence [default: 0.25]
    #[arg(long, value_name = "F")]
    conf: Option<f64>,
    /// Oracle only: probability of dropping each true box
    #[arg(long, value_name = "P")]
    drop_rate: Option<f64>,
    /// Oracle only: probability of a spurious box per true box
    #[arg(long, value_name = "P")]
    spurious_rate: Option<f64>,
    /// Oracle only: box jitter as a fraction of box size
    #[arg(long, value_name = "F")]
    jitter: Option<f64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Dataset manifest or directory
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Output directory for <image_id>.txt files
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// Dataset manifest or directory
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Read detections from this directory instead of running the detector
    #[arg(long, value_name = "DIR")]
    detections: Option<PathBuf>,
    /// Output CSV file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// How detections are counted [default: raw]
    #[arg(long, value_enum, value_name = "MODE")]
    count_mode: Option<CountModeArg>,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest or directory
    #[arg(long, value_name = "PATH", conflicts_with = "counts")]
    data: Option<PathBuf>,
    /// Train on an existing count table instead of running the detector
    #[arg(long, value_name = "FILE")]
    counts: Option<PathBuf>,
    /// Output directory for the model and reports
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Cross-validation folds [default: 5]
    #[arg(long, value_name = "K")]
    cv_folds: Option<usize>,
    /// Fraction of records held out for testing [default: 0.2]
    #[arg(long, value_name = "F")]
    test_fraction: Option<f64>,
    /// How detections are counted [default: raw]
    #[arg(long, value_enum, value_name = "MODE")]
    count_mode: Option<CountModeArg>,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Count table (CSV) with true grades
    #[arg(long, value_name = "FILE")]
    counts: PathBuf,
    /// Also write report_eval.json and report_eval.txt here
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Fundus image (PNG or JPEG)
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Ground-truth annotation file for the oracle detector
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Model file; without one, prediction endpoints answer 503
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:8080", value_name = "ADDR")]
    listen: SocketAddr,
    /// Directory for stored images and the triage log
    #[arg(long, default_value = "drscreen-data", value_name = "DIR")]
    data_dir: PathBuf,
    /// Dataset whose annotations back the oracle detector
    #[arg(long, value_name = "PATH")]
    truth_data: Option<PathBuf>,
    /// Largest accepted upload in bytes
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD, value_name = "BYTES")]
    max_upload: usize,
    /// Number of uploaded images kept on disk
    #[arg(long, default_value_t = DEFAULT_RETENTION, value_name = "N")]
    retention: usize,
    #[command(flatten)]
    detector: DetectorArgs,
}

struct Failure {
    stage: String,
    message: String,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure {
            stage: e.stage.to_string(),
            message: e.message,
        }
    }
}

fn at<E: Display>(stage: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

fn usage_error(message: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, message).exit()
}

/// Config file (or defaults) with the global flags applied.
fn base_config(g: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new("", ""),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.split.seed = s;
        if let Some(p) = &mut cfg.perturbation {
            p.seed = s;
        }
    }
    if g.no_timestamps {
        cfg.timestamps = false;
    }
    Ok(cfg)
}

impl DetectorArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        if let Some(p) = &self.detector_config {
            cfg.detector = DetectorConfig::load(p).map_err(at("config"))?;
        }
        if let Some(m) = self.detector {
            cfg.detector.mode = match m {
                ModeArg::Oracle => DetectorMode::Oracle,
                ModeArg::External => DetectorMode::External,
            };
        }
        if let Some(c) = &self.detector_cmd {
            cfg.detector.external_command = c.split_whitespace().map(String::from).collect();
        }
        if let Some(t) = self.conf {
            cfg.detector.confidence_threshold = t;
        }
        if self.drop_rate.is_some() || self.spurious_rate.is_some() || self.jitter.is_some() {
            let seed = cfg.seed;
            let p = cfg.perturbation.get_or_insert(OraclePerturbation {
                seed,
                ..Default::default()
            });
            p.drop_rate = self.drop_rate.unwrap_or(p.drop_rate);
            p.spurious_rate = self.spurious_rate.unwrap_or(p.spurious_rate);
            p.jitter = self.jitter.unwrap_or(p.jitter);
        }
        cfg.detector.validate().map_err(at("config"))?;
        if let Some(p) = &cfg.perturbation {
            p.validate().map_err(at("config"))?;
        }
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(at("load"))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure {
        stage: "persist".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn synth(g: &Global, a: &SynthArgs) -> Result<(), Failure> {
    let cfg = base_config(g)?;
    let images = generate_synthetic_dataset(&SynthConfig {
        n_per_grade: a.n_per_grade,
        image_size: a.image_size,
        seed: cfg.seed,
        label_flip_rate: a.label_flip_rate,
    })
    .map_err(at("synth"))?;
    let manifest = write_synthetic_dataset(&images, &a.out).map_err(at("persist"))?;
    println!("wrote {} images; manifest {}", images.len(), manifest.display());
    Ok(())
}

fn bundle(g: &Global, a: &BundleArgs) -> Result<(), Failure> {
    let cfg = base_config(g)?;
    let dataset = load_dataset(&a.data)?;
    let opts = BundleOptions {
        augment: a.augment,
        seed: cfg.seed,
        val_fraction: a.val_fraction,
        ..Default::default()
    };
    let yaml = prepare_training_bundle(&dataset, &a.out, &opts).map_err(at("bundle"))?;
    println!("{}", yaml.display());
    Ok(())
}

fn detect_cmd(g: &Global, a: &DetectArgs) -> Result<(), Failure> {
    let mut cfg = base_config(g)?;
    a.detector.apply(&mut cfg)?;
    let dataset = load_dataset(&a.data)?;
    let dets = detect_dataset(&dataset, &cfg.detector, cfg.perturbation.as_ref(), None).map_err(at("detect"))?;
    std::fs::create_dir_all(&a.out).map_err(at("persist"))?;
    for (id, d) in &dets {
        write_annotation_file(d, &a.out.join(format!("{id}.txt")), true).map_err(at("persist"))?;
    }
    match score_detections(&dataset, &dets) {
        Some(r) => {
            write_text(&a.out.join("report_detection.json"), &pretty(&r))?;
            write_text(&a.out.join("report_detection.txt"), &r.to_text())?;
            print!("{}", r.to_text());
        }
        None => println!(
            "{} images, {} detections",
            dets.len(),
            dets.values().map(Vec::len).sum::<usize>()
        ),
    }
    Ok(())
}

fn featurize_cmd(g: &Global, a: &FeaturizeArgs) -> Result<(), Failure> {
    let mut cfg = base_config(g)?;
    a.detector.apply(&mut cfg)?;
    if let Some(m) = a.count_mode {
        cfg.count_mode = m.into();
    }
    let dataset = load_dataset(&a.data)?;
    let dets = match &a.detections {
        Some(dir) => {
            let ids: Vec<String> = dataset.records.iter().map(|r| r.image_id.clone()).collect();
            if !dir.is_dir() {
                return Err(Failure {
                    stage: "load".into(),
                    message: format!("{}: not a directory", dir.display()),
                });
            }
            parse_detection_output(dir, &ids)
                .map_err(at("load"))?
                .into_iter()
                .map(|(id, d)| (id, cfg.detector.filter(d)))
                .collect()
        }
        None => detect_dataset(&dataset, &cfg.detector, cfg.perturbation.as_ref(), None).map_err(at("detect"))?,
    };
    let classes = active_classes(&dataset.class_subset, &cfg.detector.class_subset);
    let table = featurize(&dataset, &dets, &classes, cfg.count_mode);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(at("persist"))?;
    }
    table.write(&a.out).map_err(at("persist"))?;
    println!("{} rows, {} features -> {}", table.rows.len(), classes.len(), a.out.display());
    Ok(())
}

fn train(g: &Global, a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = base_config(g)?;
    a.detector.apply(&mut cfg)?;
    if let Some(d) = &a.data {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(k) = a.cv_folds {
        cfg.cv_folds = k;
    }
    if let Some(f) = a.test_fraction {
        cfg.split.test_fraction = f;
    }
    if let Some(m) = a.count_mode {
        cfg.count_mode = m.into();
    }
    if cfg.output_dir.as_os_str().is_empty() {
        usage_error("train needs --out (or output_dir in --config)");
    }
    let outcome = match &a.counts {
        Some(path) => {
            let table = CountTable::read(path).map_err(|e| RunError {
                stage: Stage::Load,
                message: e.to_string(),
            })?;
            run_training_on_counts(&cfg, &table)?
        }
        None => {
            if cfg.dataset.as_os_str().is_empty() {
                usage_error("train needs --data or --counts (or dataset in --config)");
            }
            run_training(&cfg)?.train
        }
    };
    print!("{}", outcome.test_report.to_text("test split"));
    println!("model: {}", cfg.output_dir.join(drscreen_core::pipeline::MODEL_FILE).display());
    Ok(())
}

fn evaluate_cmd(g: &Global, a: &EvaluateArgs) -> Result<(), Failure> {
    base_config(g)?;
    let model = load_model(&a.model).map_err(at("load"))?;
    let table = CountTable::read(&a.counts).map_err(at("load"))?;
    if let Some(schema) = &model.features {
        if schema.lesion_classes != table.classes {
            return Err(Failure {
                stage: "evaluate".into(),
                message: format!(
                    "count table columns {:?} do not match the model's lesion classes {:?}",
                    table.classes.iter().map(|c| c.column()).collect::<Vec<_>>(),
                    schema.lesion_classes.iter().map(|c| c.column()).collect::<Vec<_>>()
                ),
            });
        }
    }
    let report = evaluate(&model, &table.features(), &table.grades()).map_err(at("evaluate"))?;
    let text = report.to_text("evaluation");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(at("persist"))?;
        write_text(&dir.join("report_eval.json"), &pretty(&report))?;
        write_text(&dir.join("report_eval.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn predict(g: &Global, a: &PredictArgs) -> Result<(), Failure> {
    let mut cfg = base_config(g)?;
    a.detector.apply(&mut cfg)?;
    let loaded = LoadedModel::load(&a.model).map_err(at("load"))?;
    let bytes = std::fs::read(&a.image).map_err(|e| Failure {
        stage: "load".into(),
        message: format!("{}: {e}", a.image.display()),
    })?;
    // The oracle keys its random stream on the dataset id, i.e. the file stem.
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let truth = match &a.truth {
        Some(p) => Some(read_annotation_file(p, &stem).map_err(at("load"))?),
        None => None,
    };
    let dets = detect(
        &stem,
        Some(&a.image),
        &cfg.detector,
        truth.as_deref(),
        cfg.perturbation.as_ref(),
    )
    .map_err(at("detect"))?;
    let response = loaded
        .respond(content_hash(&bytes)[..32].to_string(), &dets)
        .map_err(at("predict"))?;
    match a.format {
        Format::Json => print!("{}", pretty(&response)),
        Format::Text => {
            println!("grade: {} ({})", response.grade.id(), response.grade_label);
            println!("referable: {}", if response.referable { "yes" } else { "no" });
            let counts: Vec<String> = response
                .counts
                .iter()
                .filter(|(_, n)| **n > 0)
                .map(|(k, n)| format!("{k}={n}"))
                .collect();
            println!("detections: {} [{}]", response.detections.len(), counts.join(" "));
        }
    }
    Ok(())
}

fn serve(g: &Global, a: &ServeArgs) -> Result<(), Failure> {
    let mut cfg = base_config(g)?;
    a.detector.apply(&mut cfg)?;
    let mut sc = ServiceConfig::new(&a.data_dir);
    sc.listen = a.listen;
    sc.model_path = a.model.clone();
    sc.detector = cfg.detector;
    sc.perturbation = cfg.perturbation;
    sc.truth_dataset = a.truth_data.clone();
    sc.max_upload = a.max_upload;
    sc.retention = a.retention;
    let rt = tokio::runtime::Runtime::new().map_err(at("serve"))?;
    rt.block_on(drscreen_service::serve(sc)).map_err(at("serve"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Bundle(a) => bundle(g, a),
        Command::Detect(a) => detect_cmd(g, a),
        Command::Featurize(a) => featurize_cmd(g, a),
        Command::Train(a) => train(g, a),
        Command::Evaluate(a) => evaluate_cmd(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Serve(a) => serve(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {} stage failed: {}", f.stage, f.message);
            ExitCode::from(1)
        }
    }
}
