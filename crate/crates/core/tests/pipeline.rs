use drscreen_core::dataset::{generate_synthetic_dataset, split_indices, write_synthetic_dataset, SynthConfig};
use drscreen_core::domain::DrGrade;
use drscreen_core::pipeline::{fit_on_training, run_training, train_from_counts, CountTable, RunConfig, Stage};
use drscreen_core::svm::model_to_string;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn synth(dir: &Path, n_per_grade: usize, seed: u64) -> PathBuf {
    let images = generate_synthetic_dataset(&SynthConfig {
        n_per_grade,
        image_size: 96,
        seed,
        label_flip_rate: 0.0,
    })
    .unwrap();
    write_synthetic_dataset(&images, dir).unwrap()
}

fn config(manifest: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(manifest, out);
    c.timestamps = false;
    c
}

#[test]
fn synthetic_run_is_accurate_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 30, 11);
    let out = tmp.path().join("run");
    let start = Instant::now();
    let r = run_training(&config(&manifest, &out)).unwrap();
    eprintln!("run took {:?}", start.elapsed());
    assert!(r.train.test_report.accuracy >= 0.95, "{}", r.train.test_report.to_text("test"));
    assert_eq!(r.train.test_report.n_test, 30);
    assert_eq!(r.train.test_report.n_train, 120);
    for f in [
        "counts.csv",
        "model.svm",
        "report_train.json",
        "report_train.txt",
        "report_test.json",
        "report_test.txt",
        "cv_table.csv",
        "run_config.json",
        "report_detection.json",
        "artifacts.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let counts = std::fs::read_to_string(out.join("counts.csv")).unwrap();
    assert!(counts.starts_with("image_id,ma,hem,he,se,irma,vb,prolif,grade\n"));
    assert_eq!(counts.lines().count(), 151);
    let det = r.detection_report.unwrap();
    assert_eq!(det.micro.metrics.f1, 1.0);
    let text = std::fs::read_to_string(out.join("report_test.txt")).unwrap();
    assert!(text.contains("0.84"));
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 10, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_training(&config(&manifest, &a)).unwrap();
    run_training(&config(&manifest, &b)).unwrap();
    for f in ["counts.csv", "model.svm", "report_train.json", "report_test.json", "cv_table.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn count_table_retrain_reproduces_model_file() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 10, 4);
    let out = tmp.path().join("run");
    let cfg = config(&manifest, &out);
    run_training(&cfg).unwrap();
    let table = CountTable::read(&out.join("counts.csv")).unwrap();
    let again = train_from_counts(&table, &cfg).unwrap();
    assert_eq!(model_to_string(&again.model), std::fs::read_to_string(out.join("model.svm")).unwrap());
}

#[test]
fn single_grade_dataset_fails_at_train_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 4, 1);
    let labels = tmp.path().join("d/trainLabels.csv");
    let text = std::fs::read_to_string(&labels).unwrap();
    let mut fixed = String::new();
    for (i, l) in text.lines().enumerate() {
        if i == 0 {
            fixed.push_str(l);
        } else {
            fixed.push_str(&format!("{},2", l.split(',').next().unwrap()));
        }
        fixed.push('\n');
    }
    std::fs::write(&labels, fixed).unwrap();
    let err = run_training(&config(&manifest, &tmp.path().join("run"))).unwrap_err();
    assert_eq!(err.stage, Stage::Train, "{err}");
    // Partial artifacts are kept.
    assert!(tmp.path().join("run/counts.csv").exists());
}

#[test]
fn missing_dataset_fails_at_load_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_training(&config(&tmp.path().join("nope"), &tmp.path().join("run"))).unwrap_err();
    assert_eq!(err.stage, Stage::Load);
}

#[test]
fn test_rows_do_not_leak_into_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 10, 8);
    let out = tmp.path().join("run");
    let mut cfg = config(&manifest, &out);
    cfg.preprocess.select_k = Some(5);
    cfg.preprocess.pca = Some(drscreen_core::features::PcaTarget::Components(3));
    let r = run_training(&cfg).unwrap();
    let mut table = r.counts.clone();
    let grades: Vec<DrGrade> = table.grades();
    let (_, test_idx) = split_indices(&grades, &cfg.split).unwrap();
    for &i in &test_idx {
        table.rows[i].values.iter_mut().for_each(|v| *v = *v * 7.0 + 13.0);
    }
    let again = train_from_counts(&table, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&again.model.preprocess).unwrap(),
        serde_json::to_string(&r.train.model.preprocess).unwrap()
    );
    assert_eq!(again.best, r.train.best);
    assert_eq!(
        serde_json::to_string(&again.cv_table).unwrap(),
        serde_json::to_string(&r.train.cv_table).unwrap()
    );
    // The same holds for fitting on the training rows directly.
    let (train_idx, _) = split_indices(&grades, &cfg.split).unwrap();
    let x: Vec<Vec<f64>> = train_idx.iter().map(|&i| table.rows[i].values.clone()).collect();
    let y: Vec<DrGrade> = train_idx.iter().map(|&i| table.rows[i].grade).collect();
    let (params, best, _) = fit_on_training(&x, &y, &cfg).unwrap();
    assert_eq!(params, r.train.model.preprocess);
    assert_eq!(best, r.train.best);
}
