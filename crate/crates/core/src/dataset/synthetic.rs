//! Rule-based synthetic fundus dataset.
//!
//! Each grade maps to a fixed range of lesion counts, so the grade of every
//! image is a function of its annotation counts (see [`grade_from_counts`]).
//! Lesions are drawn as filled ellipses on a dark circular disc and never
//! overlap one another.

use super::{DatasetError, Manifest};
use crate::domain::{BBox, Detection, DrGrade, GradedRecord, LesionClass};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

const DISC_RADIUS: f64 = 0.45;
const PLACEMENT_RETRIES: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_grade: usize,
    pub image_size: u32,
    pub seed: u64,
    /// Probability that a record's grade label is replaced by a different grade.
    pub label_flip_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_grade: 20,
            image_size: 256,
            seed: 42,
            label_flip_rate: 0.0,
        }
    }
}

pub struct SyntheticImage {
    pub record: GradedRecord,
    pub annotations: Vec<Detection>,
    pub image: RgbImage,
}

/// Labeler implied by the generation rules.
pub fn grade_from_counts(counts: &[usize; LesionClass::COUNT]) -> DrGrade {
    use LesionClass::*;
    let c = |l: LesionClass| counts[l.id()];
    if c(Proliferative) > 0 {
        DrGrade::ProliferativeDr
    } else if c(Irma) + c(VenousBeading) > 0 {
        DrGrade::Severe
    } else if c(Hemorrhage) + c(HardExudate) + c(SoftExudate) > 0 {
        DrGrade::Moderate
    } else if c(Microaneurysm) > 0 {
        DrGrade::Mild
    } else {
        DrGrade::NoDr
    }
}

fn moderate_counts(rng: &mut ChaCha8Rng, counts: &mut [usize; 7]) {
    counts[0] = rng.random_range(3..=10);
    counts[1] = rng.random_range(1..=5);
    counts[2] = rng.random_range(0..=3);
    counts[3] = rng.random_range(0..=2);
}

fn severe_counts(rng: &mut ChaCha8Rng, counts: &mut [usize; 7]) {
    moderate_counts(rng, counts);
    counts[1] = rng.random_range(5..=10);
    counts[4] = rng.random_range(0..=3);
    counts[5] = rng.random_range(0..=3);
    if counts[4] + counts[5] == 0 {
        counts[if rng.random_bool(0.5) { 4 } else { 5 }] = 1;
    }
}

/// Draws lesion counts for a grade from the rule table.
pub fn sample_counts(grade: DrGrade, rng: &mut ChaCha8Rng) -> [usize; LesionClass::COUNT] {
    let mut counts = [0usize; 7];
    match grade {
        DrGrade::NoDr => {}
        DrGrade::Mild => counts[0] = rng.random_range(1..=5),
        DrGrade::Moderate => moderate_counts(rng, &mut counts),
        DrGrade::Severe => severe_counts(rng, &mut counts),
        DrGrade::ProliferativeDr => {
            if rng.random_bool(0.5) {
                moderate_counts(rng, &mut counts);
            } else {
                severe_counts(rng, &mut counts);
            }
            counts[6] = rng.random_range(1..=3);
        }
    }
    counts
}

fn lesion_radius(class: LesionClass) -> f64 {
    match class {
        LesionClass::Microaneurysm => 0.012,
        LesionClass::Hemorrhage => 0.022,
        LesionClass::HardExudate => 0.02,
        LesionClass::SoftExudate => 0.026,
        LesionClass::Irma => 0.03,
        LesionClass::VenousBeading => 0.032,
        LesionClass::Proliferative => 0.04,
    }
}

pub fn lesion_color(class: LesionClass) -> Rgb<u8> {
    Rgb(match class {
        LesionClass::Microaneurysm => [150, 0, 0],
        LesionClass::Hemorrhage => [95, 5, 5],
        LesionClass::HardExudate => [235, 215, 80],
        LesionClass::SoftExudate => [240, 240, 230],
        LesionClass::Irma => [190, 40, 70],
        LesionClass::VenousBeading => [110, 20, 110],
        LesionClass::Proliferative => [220, 90, 160],
    })
}

fn boxes_touch(a: &BBox, b: &BBox, gap: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    ax0 < bx1 + gap && bx0 < ax1 + gap && ay0 < by1 + gap && by0 < ay1 + gap
}

fn inside_disc(b: &BBox) -> bool {
    let (x0, y0, x1, y1) = b.corners();
    [(x0, y0), (x0, y1), (x1, y0), (x1, y1)]
        .iter()
        .all(|(x, y)| (x - 0.5).powi(2) + (y - 0.5).powi(2) <= DISC_RADIUS * DISC_RADIUS)
}

fn place_lesions(
    counts: &[usize; 7],
    size: u32,
    rng: &mut ChaCha8Rng,
    image_id: &str,
) -> Result<Vec<Detection>, DatasetError> {
    let px = 1.0 / size as f64;
    let mut placed: Vec<Detection> = Vec::new();
    // Largest lesions first: they are hardest to fit.
    for class in LesionClass::ALL.iter().rev().copied() {
        for _ in 0..counts[class.id()] {
            let r = lesion_radius(class).max(1.5 * px);
            let mut ok = None;
            for _ in 0..PLACEMENT_RETRIES {
                let w = 2.0 * r * rng.random_range(0.8..1.2);
                let h = 2.0 * r * rng.random_range(0.8..1.2);
                let cx = rng.random_range(0.5 - DISC_RADIUS..0.5 + DISC_RADIUS);
                let cy = rng.random_range(0.5 - DISC_RADIUS..0.5 + DISC_RADIUS);
                // Snap to the annotation grid so files round-trip exactly.
                let q = |v: f64| (v * 1e6).round() / 1e6;
                let b = BBox { cx: q(cx), cy: q(cy), w: q(w), h: q(h) };
                if inside_disc(&b) && !placed.iter().any(|p| boxes_touch(&p.bbox, &b, 2.0 * px)) {
                    ok = Some(b);
                    break;
                }
            }
            let bbox = ok.ok_or_else(|| {
                DatasetError::Generation(format!(
                    "could not place {class} in `{image_id}` without overlap after {PLACEMENT_RETRIES} tries"
                ))
            })?;
            placed.push(Detection::truth(class, bbox));
        }
    }
    placed.sort_by_key(|d| d.lesion_class);
    Ok(placed)
}

/// Paints the disc and the lesion ellipses.
pub fn render_fundus(size: u32, lesions: &[Detection], rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let tint: i32 = rng.random_range(-10..=10);
    let base = [(95 + tint) as u8, (35 + tint / 2) as u8, 18u8];
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let dx = (x as f64 + 0.5) / s - 0.5;
        let dy = (y as f64 + 0.5) / s - 0.5;
        if dx * dx + dy * dy <= DISC_RADIUS * DISC_RADIUS {
            Rgb(base)
        } else {
            Rgb([0, 0, 0])
        }
    });
    for d in lesions {
        let (x0, y0, x1, y1) = d.bbox.corners();
        let (rx, ry) = (d.bbox.w / 2.0, d.bbox.h / 2.0);
        let color = lesion_color(d.lesion_class);
        let px0 = (x0 * s).floor().max(0.0) as u32;
        let py0 = (y0 * s).floor().max(0.0) as u32;
        let px1 = ((x1 * s).ceil() as u32).min(size);
        let py1 = ((y1 * s).ceil() as u32).min(size);
        for py in py0..py1 {
            for px in px0..px1 {
                let nx = ((px as f64 + 0.5) / s - d.bbox.cx) / rx;
                let ny = ((py as f64 + 0.5) / s - d.bbox.cy) / ry;
                if nx * nx + ny * ny <= 1.0 {
                    img.put_pixel(px, py, color);
                }
            }
        }
    }
    img
}

fn image_id(index: usize) -> String {
    let side = if index.is_multiple_of(2) { "left" } else { "right" };
    format!("{}_{side}", index / 2 + 1)
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticImage>, DatasetError> {
    if cfg.n_per_grade < 1 {
        return Err(DatasetError::Generation("n_per_grade must be at least 1".into()));
    }
    if cfg.image_size < 64 {
        return Err(DatasetError::Generation(format!(
            "image_size {} is below the 64 px minimum",
            cfg.image_size
        )));
    }
    if !(0.0..=1.0).contains(&cfg.label_flip_rate) {
        return Err(DatasetError::Generation("label_flip_rate must lie in [0,1]".into()));
    }
    let total = cfg.n_per_grade * DrGrade::COUNT;
    (0..total)
        .into_par_iter()
        .map(|index| {
            let grade = DrGrade::ALL[index / cfg.n_per_grade];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            let id = image_id(index);
            let counts = sample_counts(grade, &mut rng);
            let annotations = place_lesions(&counts, cfg.image_size, &mut rng, &id)?;
            let image = render_fundus(cfg.image_size, &annotations, &mut rng);
            let mut label = grade;
            if cfg.label_flip_rate > 0.0 && rng.random_bool(cfg.label_flip_rate) {
                let shift = rng.random_range(1..DrGrade::COUNT);
                label = DrGrade::ALL[(grade.id() + shift) % DrGrade::COUNT];
            }
            Ok(SyntheticImage {
                record: GradedRecord::new(id, label),
                annotations,
                image,
            })
        })
        .collect()
}

/// Writes `images/`, `labels/`, `trainLabels.csv` and `manifest.json` under `out_dir`.
pub fn write_synthetic_dataset(images: &[SyntheticImage], out_dir: &Path) -> Result<std::path::PathBuf, DatasetError> {
    let image_dir = out_dir.join("images");
    let label_dir = out_dir.join("labels");
    for d in [&image_dir, &label_dir] {
        std::fs::create_dir_all(d).map_err(|e| DatasetError::io(d, e))?;
    }
    images.par_iter().try_for_each(|s| {
        let p = image_dir.join(format!("{}.png", s.record.image_id));
        s.image
            .save(&p)
            .map_err(|e| DatasetError::Image(format!("{}: {e}", p.display())))?;
        super::write_annotation_file(
            &s.annotations,
            &label_dir.join(format!("{}.txt", s.record.image_id)),
            false,
        )
    })?;
    let records: Vec<GradedRecord> = images.iter().map(|s| s.record.clone()).collect();
    super::write_labels(&records, &out_dir.join("trainLabels.csv"))?;
    let manifest = Manifest::standard();
    let path = out_dir.join(super::MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Annotations keyed by image id.
pub fn annotation_map(images: &[SyntheticImage]) -> BTreeMap<String, Vec<Detection>> {
    images
        .iter()
        .map(|s| (s.record.image_id.clone(), s.annotations.clone()))
        .collect()
}
