use drscreen_core::dataset::Dataset;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn drscreen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drscreen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = drscreen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SUBCOMMANDS: [&str; 8] = ["synth", "bundle", "detect", "featurize", "train", "evaluate", "predict", "serve"];

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Set `UPDATE_GOLDEN=1` to rewrite the files after an intended change.
#[test]
fn help_matches_golden_files() {
    let mut cases = vec![("drscreen".to_string(), ok(&["--help"]))];
    for sub in SUBCOMMANDS {
        cases.push((sub.to_string(), ok(&[sub, "--help"])));
    }
    for (name, text) in cases {
        let path = golden_dir().join(format!("{name}.help.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, want, "help for {name} drifted from {}", path.display());
    }
}

#[test]
fn help_lists_every_flag() {
    let expect: &[(&str, &[&str])] = &[
        ("synth", &["--n-per-grade", "--image-size", "--label-flip-rate", "--out"]),
        ("bundle", &["--data", "--out", "--augment", "--val-fraction"]),
        ("detect", &["--data", "--out", "--detector", "--detector-cmd", "--conf", "--drop-rate"]),
        ("featurize", &["--data", "--detections", "--out", "--count-mode"]),
        ("train", &["--data", "--counts", "--out", "--cv-folds", "--test-fraction", "--detector"]),
        ("evaluate", &["--model", "--counts", "--out"]),
        ("predict", &["--model", "--image", "--truth", "--format", "--detector"]),
        ("serve", &["--model", "--listen", "--data-dir", "--truth-data", "--max-upload", "--retention"]),
    ];
    for (sub, flags) in expect {
        let help = ok(&[sub, "--help"]);
        for f in flags.iter().chain(&["--seed", "--config", "--no-timestamps"]) {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = drscreen(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    let out = drscreen(&["synth", "--out", "x", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = drscreen(&[]);
    assert_eq!(out.status.code(), Some(2));
    let out = drscreen(&["train", "--detector", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
}

fn stage_failure(args: &[&str], stage: &str) {
    let out = drscreen(args);
    assert_eq!(out.status.code(), Some(1), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {stage} stage failed: ")), "{err}");
}

#[test]
fn stage_errors_exit_1_naming_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    stage_failure(&["train", "--data", s(&t.join("missing")), "--out", s(&t.join("run"))], "load");
    let cfg = t.join("bad.json");
    std::fs::write(&cfg, r#"{"dataset":"d","output_dir":"o","cv_folds":1}"#).unwrap();
    stage_failure(&["train", "--config", s(&cfg)], "config");
    stage_failure(&["detect", "--data", s(&t.join("d")), "--out", s(&t.join("o")), "--drop-rate", "2"], "config");
}

#[test]
fn end_to_end_synth_train_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let run = tmp.path().join("run");
    ok(&["synth", "--n-per-grade", "20", "--out", s(&d), "--image-size", "128"]);
    ok(&["train", "--data", s(&d.join("manifest")), "--detector", "oracle", "--out", s(&run)]);
    assert!(run.join("model.svm").is_file());

    let ds = Dataset::load(&d.join("manifest.json")).unwrap();
    let model = run.join("model.svm");
    for r in ds.records.iter().step_by(17) {
        let img = d.join(format!("images/{}.png", r.image_id));
        let truth = d.join(format!("labels/{}.txt", r.image_id));
        let args = [
            "predict", "--model", s(&model), "--image", s(&img),
            "--detector", "oracle", "--truth", s(&truth),
        ];
        let v: Value = serde_json::from_str(&ok(&args)).unwrap();
        assert_eq!(v["grade"], r.grade.id(), "{}", r.image_id);
        assert_eq!(v["detections"].as_array().unwrap().len(), ds.truth(&r.image_id).len());
        let total: u64 = v["counts"].as_object().unwrap().values().map(|n| n.as_u64().unwrap()).sum();
        assert_eq!(total as usize, ds.truth(&r.image_id).len());

        let mut text_args = args.to_vec();
        text_args.extend(["--format", "text"]);
        let text = ok(&text_args);
        assert!(text.starts_with(&format!("grade: {} ({})", r.grade.id(), r.grade.label())), "{text}");
    }

    // Oracle without ground truth cannot detect anything.
    let img = d.join(format!("images/{}.png", ds.records[0].image_id));
    stage_failure(
        &["predict", "--model", s(&run.join("model.svm")), "--image", s(&img), "--detector", "oracle"],
        "detect",
    );
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn identical_flags_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let mut runs = Vec::new();
    for k in 0..2 {
        let d = t.join(format!("d{k}"));
        let run = t.join(format!("run{k}"));
        let det = t.join(format!("det{k}"));
        let bundle = t.join(format!("bundle{k}"));
        ok(&["synth", "--n-per-grade", "8", "--out", s(&d), "--image-size", "96", "--seed", "5"]);
        ok(&["bundle", "--data", s(&d), "--out", s(&bundle), "--augment", "--seed", "5"]);
        ok(&["detect", "--data", s(&d), "--out", s(&det), "--drop-rate", "0.2", "--spurious-rate", "0.1", "--jitter", "0.05"]);
        ok(&[
            "train", "--data", s(&d), "--out", s(&run), "--no-timestamps", "--seed", "5", "--cv-folds", "3",
            "--drop-rate", "0.2",
        ]);
        // Paths differ between the two runs; everything else must not.
        std::fs::remove_file(run.join("run_config.json")).unwrap();
        runs.push((read_dir_bytes(&d), read_dir_bytes(&bundle), read_dir_bytes(&det), read_dir_bytes(&run)));
    }
    assert!(runs[0] == runs[1]);

    // A different seed changes the data.
    let other = t.join("d-other");
    ok(&["synth", "--n-per-grade", "8", "--out", s(&other), "--image-size", "96", "--seed", "6"]);
    assert!(read_dir_bytes(&other) != runs[0].0);
}

#[test]
fn staged_workflow_matches_one_shot_training() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let d = t.join("d");
    ok(&["synth", "--n-per-grade", "10", "--out", s(&d), "--image-size", "96"]);
    let perturb = ["--drop-rate", "0.1", "--spurious-rate", "0.1"];

    let det = t.join("det");
    let mut args = vec!["detect", "--data", s(&d), "--out", s(&det)];
    args.extend(perturb);
    let report = ok(&args);
    assert!(report.contains("detection report"));
    assert!(det.join("report_detection.json").is_file());

    let from_files = t.join("counts_files.csv");
    ok(&["featurize", "--data", s(&d), "--detections", s(&det), "--out", s(&from_files)]);
    let direct = t.join("counts_direct.csv");
    let mut args = vec!["featurize", "--data", s(&d), "--out", s(&direct)];
    args.extend(perturb);
    ok(&args);
    assert_eq!(std::fs::read(&from_files).unwrap(), std::fs::read(&direct).unwrap());

    let staged = t.join("staged");
    ok(&["train", "--counts", s(&from_files), "--out", s(&staged), "--no-timestamps", "--cv-folds", "3"]);
    let oneshot = t.join("oneshot");
    let mut args = vec!["train", "--data", s(&d), "--out", s(&oneshot), "--no-timestamps", "--cv-folds", "3"];
    args.extend(perturb);
    ok(&args);
    for f in ["model.svm", "counts.csv", "cv_table.csv", "report_test.json"] {
        assert_eq!(std::fs::read(staged.join(f)).unwrap(), std::fs::read(oneshot.join(f)).unwrap(), "{f}");
    }

    let eval_dir = t.join("eval");
    let text = ok(&["evaluate", "--model", s(&oneshot.join("model.svm")), "--counts", s(&direct), "--out", s(&eval_dir)]);
    assert!(text.contains("accuracy"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report_eval.json")).unwrap()).unwrap();
    assert_eq!(v["confusion"].as_array().unwrap().len(), 5);
    let n: u64 = v["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()))
        .sum();
    assert_eq!(n, 50);
}

#[test]
fn config_file_drives_training() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let d = t.join("d");
    ok(&["synth", "--n-per-grade", "8", "--out", s(&d), "--image-size", "96"]);
    let cfg = t.join("run.json");
    let run = t.join("run");
    let body = serde_json::json!({
        "dataset": d,
        "output_dir": run,
        "cv_folds": 2,
        "grid": {"c": [1.0], "gamma": ["scale"], "kernel": ["linear"]},
        "timestamps": false,
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(written["cv_folds"], 2);
    assert_eq!(written["seed"], 42);
    let cv = std::fs::read_to_string(run.join("cv_table.csv")).unwrap();
    assert_eq!(cv.lines().count(), 2, "{cv}");

    // Command-line flags override the file.
    let run2 = t.join("run2");
    ok(&["train", "--config", s(&cfg), "--out", s(&run2), "--seed", "9", "--cv-folds", "3"]);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(run2.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(written["cv_folds"], 3);
    assert_eq!(written["seed"], 9);
    assert_eq!(written["split"]["seed"], 9);
}

#[test]
fn evaluate_rejects_mismatched_count_table() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let d = t.join("d");
    ok(&["synth", "--n-per-grade", "6", "--out", s(&d), "--image-size", "96"]);
    let run = t.join("run");
    ok(&["train", "--data", s(&d), "--out", s(&run), "--cv-folds", "2"]);
    let counts = std::fs::read_to_string(run.join("counts.csv")).unwrap();
    // Drop the last lesion column.
    let cut: String = counts
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(f.len() - 2);
            f.join(",") + "\n"
        })
        .collect();
    let bad = t.join("cut.csv");
    std::fs::write(&bad, cut).unwrap();
    stage_failure(&["evaluate", "--model", s(&run.join("model.svm")), "--counts", s(&bad)], "evaluate");
}
