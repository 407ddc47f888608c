//! Ground-truth replay with controlled errors.

use super::{DetectorConfig, DetectorError};
use crate::deteval::iou;
use crate::domain::{BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;

const SPURIOUS_RETRIES: usize = 100;
const SPURIOUS_SIZE: (f64, f64) = (0.02, 0.1);

/// Error model for the oracle.
///
/// Each truth box is dropped with probability `drop_rate`; each truth box
/// also spawns, with probability `spurious_rate`, one false box that touches
/// no truth box. Kept boxes are jittered by uniform noise of amplitude
/// `jitter·w` (x and width) and `jitter·h` (y and height), then clipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OraclePerturbation {
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub spurious_rate: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OraclePerturbation {
    pub fn validate(&self) -> Result<(), DetectorError> {
        for (name, v) in [("drop_rate", self.drop_rate), ("spurious_rate", self.spurious_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectorError::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(DetectorError::Config(format!("jitter {} must be non-negative", self.jitter)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.drop_rate == 0.0 && self.spurious_rate == 0.0 && self.jitter == 0.0
    }
}

fn image_stream(image_id: &str) -> u64 {
    let digest = Sha256::digest(image_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn canonical(a: &Detection, b: &Detection) -> Ordering {
    a.lesion_class
        .cmp(&b.lesion_class)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.confidence.total_cmp(&b.confidence))
}

fn jittered(b: &BBox, jitter: f64, rng: &mut ChaCha8Rng) -> BBox {
    let mut u = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
    let (ax, ay) = (jitter * b.w, jitter * b.h);
    let moved = BBox {
        cx: b.cx + u(ax),
        cy: b.cy + u(ay),
        w: (b.w + u(ax)).max(1e-6),
        h: (b.h + u(ay)).max(1e-6),
    };
    // A jittered box that left the image entirely keeps its original geometry.
    moved.clipped().unwrap_or(*b)
}

/// Replays `truth` through the perturbation. Randomness is drawn per image
/// (seeded from `perturb.seed` and the image id) over the truth boxes in a
/// canonical order, so the result does not depend on the order of `truth`
/// beyond the order of the returned sequence.
pub fn oracle_detect(
    image_id: &str,
    truth: &[Detection],
    perturb: &OraclePerturbation,
    config: &DetectorConfig,
) -> Result<Vec<Detection>, DetectorError> {
    perturb.validate()?;
    if perturb.is_identity() {
        return Ok(truth.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.seed);
    rng.set_stream(image_stream(image_id));

    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| canonical(&truth[a], &truth[b]).then(a.cmp(&b)));

    let mut kept: Vec<Option<Detection>> = vec![None; truth.len()];
    let mut spawn = 0usize;
    for &i in &order {
        let drop = rng.random::<f64>() < perturb.drop_rate;
        if rng.random::<f64>() < perturb.spurious_rate {
            spawn += 1;
        }
        if !drop {
            let bbox = jittered(&truth[i].bbox, perturb.jitter, &mut rng);
            kept[i] = Some(Detection { bbox, ..truth[i] });
        }
    }
    let mut out: Vec<Detection> = kept.into_iter().flatten().collect();

    let lo = config.confidence_threshold;
    for _ in 0..spawn {
        for _ in 0..SPURIOUS_RETRIES {
            let w = rng.random_range(SPURIOUS_SIZE.0..=SPURIOUS_SIZE.1);
            let h = rng.random_range(SPURIOUS_SIZE.0..=SPURIOUS_SIZE.1);
            let bbox = BBox {
                cx: rng.random_range(w / 2.0..=1.0 - w / 2.0),
                cy: rng.random_range(h / 2.0..=1.0 - h / 2.0),
                w,
                h,
            };
            let lesion_class = config.class_subset[rng.random_range(0..config.class_subset.len())];
            let confidence = if lo < 1.0 { rng.random_range(lo..=1.0) } else { 1.0 };
            let clear = truth.iter().chain(out.iter()).all(|t| iou(&t.bbox, &bbox) == 0.0);
            if clear {
                out.push(Detection { lesion_class, bbox, confidence });
                break;
            }
        }
    }
    Ok(out)
}
