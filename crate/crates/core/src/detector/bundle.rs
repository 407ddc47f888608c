//! Training bundle for the external detector.
//!
//! Layout under the output directory:
//!
//! ```text
//! data.yaml              dataset description (see below)
//! train.txt, val.txt     image paths relative to the bundle root, one per line
//! images/{train,val}/    <id>.png (augmented variants: <id>__<op>.png, train only)
//! labels/{train,val}/    <id>.txt, five fields per line
//! ```
//!
//! `data.yaml` follows the Ultralytics dataset convention:
//! `path`, `train`, `val`, `nc` and the ordered class `names`.

use super::augment::{augment_image, AugmentOp};
use super::DetectorError;
use crate::dataset::{split_indices, write_annotation_file, Dataset, DatasetError, SplitSpec};
use crate::domain::{Detection, DrGrade, LesionClass};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const BUNDLE_MANIFEST: &str = "data.yaml";

#[derive(Debug, Clone, PartialEq)]
pub struct BundleOptions {
    pub augment: bool,
    pub seed: u64,
    pub val_fraction: f64,
    pub ops: Vec<AugmentOp>,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions {
            augment: false,
            seed: 42,
            val_fraction: 0.2,
            ops: vec![
                AugmentOp::FlipH,
                AugmentOp::FlipV,
                AugmentOp::Rot90,
                AugmentOp::Crop(0.8),
                AugmentOp::Noise(8.0),
            ],
        }
    }
}

fn mkdir(p: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(p).map_err(|e| DatasetError::io(p, e))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), DatasetError> {
    img.save(path)
        .map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))
}

/// Writes the bundle and returns the path of its `data.yaml`.
pub fn prepare_training_bundle(dataset: &Dataset, out_dir: &Path, opts: &BundleOptions) -> Result<PathBuf, DetectorError> {
    // Check inputs before writing anything.
    let mut sources = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let path = dataset
            .image_path(&r.image_id)
            .ok_or_else(|| DetectorError::MissingImage(r.image_id.clone()))?;
        let truth = dataset
            .annotations
            .get(&r.image_id)
            .ok_or_else(|| DetectorError::MissingTruth(r.image_id.clone()))?;
        sources.push((r.image_id.as_str(), path, truth.as_slice()));
    }

    let grades: Vec<DrGrade> = dataset.records.iter().map(|r| r.grade).collect();
    let spec = SplitSpec {
        test_fraction: opts.val_fraction,
        seed: opts.seed,
        stratified: true,
    };
    let (train, val) = match split_indices(&grades, &spec) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("stratified train/val split not possible ({e}); falling back to a plain split");
            split_indices(&grades, &SplitSpec { stratified: false, ..spec })?
        }
    };

    for part in ["train", "val"] {
        mkdir(&out_dir.join("images").join(part))?;
        mkdir(&out_dir.join("labels").join(part))?;
    }

    let write_pair = |part: &str, name: &str, img: &image::RgbImage, boxes: &[Detection]| -> Result<String, DetectorError> {
        let rel = format!("images/{part}/{name}.png");
        save_png(img, &out_dir.join(&rel))?;
        write_annotation_file(boxes, &out_dir.join("labels").join(part).join(format!("{name}.txt")), false)?;
        Ok(rel)
    };

    let mut lists: [Vec<String>; 2] = Default::default();
    for (slot, (part, idx)) in [("train", &train), ("val", &val)].into_iter().enumerate() {
        for &i in idx {
            let (id, path, truth) = &sources[i];
            let img = image::open(path)
                .map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            lists[slot].push(write_pair(part, id, &img, truth)?);
            if opts.augment && part == "train" {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i as u64);
                for op in &opts.ops {
                    let (aug, boxes) = augment_image(&img, *op, truth, &mut rng);
                    lists[slot].push(write_pair(part, &format!("{id}__{}", op.tag()), &aug, &boxes)?);
                }
            }
        }
    }
    for (name, list) in [("train.txt", &lists[0]), ("val.txt", &lists[1])] {
        let mut text = list.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| DatasetError::io(&p, e))?;
    }

    let mut yaml = String::from("path: .\ntrain: train.txt\nval: val.txt\n");
    let _ = writeln!(yaml, "nc: {}", LesionClass::COUNT);
    yaml.push_str("names:\n");
    for c in LesionClass::ALL {
        let _ = writeln!(yaml, "  {}: {}", c.id(), c.name());
    }
    let manifest = out_dir.join(BUNDLE_MANIFEST);
    std::fs::write(&manifest, yaml).map_err(|e| DatasetError::io(&manifest, e))?;
    Ok(manifest)
}
