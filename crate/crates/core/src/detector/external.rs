//! File-exchange adapter for an external detector process.
//!
//! Each call gets its own exchange directory with `input/` holding the
//! images as `<image_id>.<ext>` and an empty `output/`. The tool is expected
//! to write one `<image_id>.txt` per image with lines
//! `class cx cy w h conf`; images it found nothing in may be omitted.

use super::{DetectorConfig, DetectorError};
use crate::dataset::{parse_annotations, DatasetError};
use crate::domain::Detection;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

fn substitute(arg: &str, input: &Path, output: &Path, conf: f64) -> String {
    arg.replace("{input_dir}", &input.to_string_lossy())
        .replace("{output_dir}", &output.to_string_lossy())
        .replace("{conf}", &conf.to_string())
}

/// Runs the configured command over `images` (`(image_id, path)` pairs) and
/// returns the filtered detections of every image. The exchange directory
/// lives under `exchange_root` (the system temp dir when `None`) and is
/// removed afterwards.
pub fn run_external(
    config: &DetectorConfig,
    images: &[(String, PathBuf)],
    exchange_root: Option<&Path>,
) -> Result<BTreeMap<String, Vec<Detection>>, DetectorError> {
    config.validate()?;
    let mut builder = tempfile::Builder::new();
    builder.prefix("drscreen-detect-");
    let exchange = match exchange_root {
        Some(root) => builder.tempdir_in(root),
        None => builder.tempdir(),
    }
    .map_err(|e| DatasetError::io(exchange_root.unwrap_or(Path::new("<tmp>")), e))?;
    let input = exchange.path().join("input");
    let output = exchange.path().join("output");
    for d in [&input, &output] {
        std::fs::create_dir(d).map_err(|e| DatasetError::io(d, e))?;
    }
    for (id, path) in images {
        if !path.exists() {
            return Err(DetectorError::MissingImage(id.clone()));
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
        let dest = input.join(format!("{id}.{ext}"));
        std::fs::copy(path, &dest).map_err(|e| DatasetError::io(&dest, e))?;
    }

    let argv: Vec<String> = config
        .external_command
        .iter()
        .map(|a| substitute(a, &input, &output, config.confidence_threshold))
        .collect();
    let command = argv.join(" ");
    log::info!("running external detector: {command}");
    let result = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|source| DetectorError::Spawn {
            command: command.clone(),
            source,
        })?;
    if !result.status.success() {
        return Err(DetectorError::External {
            command,
            status: result.status.to_string(),
            stdout: String::from_utf8_lossy(&result.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&result.stderr).into_owned(),
        });
    }
    let ids: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    let parsed = parse_detection_output(&output, &ids)?;
    Ok(parsed.into_iter().map(|(id, d)| (id, config.filter(d))).collect())
}

/// Reads `<id>.txt` for each expected id. A missing file means no
/// detections; every present line must carry all six fields.
pub fn parse_detection_output(
    dir: &Path,
    expected_ids: &[String],
) -> Result<BTreeMap<String, Vec<Detection>>, DetectorError> {
    let mut out = BTreeMap::new();
    for id in expected_ids {
        let path = dir.join(format!("{id}.txt"));
        let dets = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
            let err = |line: usize, message: String| {
                DetectorError::Output(DatasetError::Annotation {
                    path: path.clone(),
                    image_id: id.clone(),
                    line,
                    message,
                })
            };
            for (i, l) in text.lines().enumerate() {
                let n = l.split_whitespace().count();
                if n != 0 && n != 6 {
                    return Err(err(i + 1, format!("expected 6 fields, found {n}")));
                }
            }
            parse_annotations(&text).map_err(|(line, msg)| err(line, msg))?
        } else {
            Vec::new()
        };
        out.insert(id.clone(), dets);
    }
    Ok(out)
}
