//! Detection scoring: IoU, greedy class-wise matching, precision/recall/F1.

use crate::domain::{BBox, Detection, LesionClass};
use serde::{Deserialize, Serialize};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Indexed by lesion class id.
    pub per_class: [Counts; LesionClass::COUNT],
    /// Indices refer to the inputs of the `match_detections` call that
    /// produced them; merged results keep every image's pairs.
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    pub fn total(&self) -> Counts {
        let mut t = Counts::default();
        for c in &self.per_class {
            t.add(c);
        }
        t
    }

    pub fn merge(&mut self, other: &MatchResult) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        self.pairs.extend_from_slice(&other.pairs);
    }
}

/// Greedy confidence-ordered matching.
///
/// Detections are visited by descending confidence (ties keep input order);
/// each claims the unmatched truth box of its own class with the highest IoU,
/// provided that IoU reaches `iou_threshold`.
pub fn match_detections(detections: &[Detection], truth: &[Detection], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));

    let mut claimed = vec![false; truth.len()];
    let mut result = MatchResult::default();
    for di in order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truth.iter().enumerate() {
            if claimed[ti] || t.lesion_class != det.lesion_class {
                continue;
            }
            let v = iou(&det.bbox, &t.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((ti, v));
            }
        }
        let counts = &mut result.per_class[det.lesion_class.id()];
        match best {
            Some((ti, v)) => {
                claimed[ti] = true;
                counts.tp += 1;
                result.pairs.push(MatchedPair {
                    detection: di,
                    truth: ti,
                    iou: v,
                });
            }
            None => counts.fp += 1,
        }
    }
    for (ti, t) in truth.iter().enumerate() {
        if !claimed[ti] {
            result.per_class[t.lesion_class.id()].fn_ += 1;
        }
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn prf(c: &Counts) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub lesion_class: String,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub metrics: Prf,
}

/// Detection evaluation report.
///
/// JSON schema: `{ "iou_threshold", "per_class": [{lesion_class, tp, fp, fn,
/// precision, recall, f1}], "micro": {tp, fp, fn, precision, recall, f1},
/// "reference": {...} }`. The `reference` block carries published figures
/// for a YOLOv8 detector on Kaggle fundus data; they are never recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassRow>,
    pub micro: ClassRow,
    pub reference: crate::reference::DetectorReference,
}

pub fn detection_metrics(result: &MatchResult, iou_threshold: f64) -> DetectionReport {
    let row = |name: &str, c: &Counts| ClassRow {
        lesion_class: name.to_string(),
        counts: *c,
        metrics: prf(c),
    };
    DetectionReport {
        iou_threshold,
        per_class: LesionClass::ALL
            .iter()
            .map(|l| row(l.name(), &result.per_class[l.id()]))
            .collect(),
        micro: row("ALL", &result.total()),
        reference: crate::reference::DETECTOR_REFERENCE,
    }
}

impl DetectionReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "detection report (IoU >= {})\n{:<16} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}\n",
            self.iou_threshold, "class", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for r in self.per_class.iter().chain(std::iter::once(&self.micro)) {
            out.push_str(&format!(
                "{:<16} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                r.lesion_class, r.counts.tp, r.counts.fp, r.counts.fn_, r.metrics.precision, r.metrics.recall, r.metrics.f1
            ));
        }
        out.push_str(&format!(
            "reference (not reproduced): accuracy {:.2}, precision {:.2}, f1 {:.2}\n",
            self.reference.accuracy, self.reference.precision, self.reference.f1
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox { cx, cy, w, h }
    }

    fn det(c: LesionClass, b: BBox, conf: f64) -> Detection {
        Detection {
            lesion_class: c,
            bbox: b,
            confidence: conf,
        }
    }

    #[test]
    fn iou_unit_values() {
        let a = bx(0.25, 0.25, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.8, 0.8, 0.2, 0.2)), 0.0);
        // Intersection .0625, union .25 + .25 - .0625 = .4375.
        let b = bx(0.5, 0.5, 0.5, 0.5);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_match() {
        let t = det(LesionClass::Hemorrhage, bx(0.5, 0.5, 0.2, 0.2), 1.0);
        // Same size box shifted so IoU = 0.6 exactly: overlap width 0.15 of 0.2 => 0.75/1.25.
        let d = det(LesionClass::Hemorrhage, bx(0.55, 0.5, 0.2, 0.2), 0.9);
        assert!((iou(&d.bbox, &t.bbox) - 0.6).abs() < 1e-12);
        let r = match_detections(&[d], &[t], 0.5);
        assert_eq!(r.per_class[1], Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn higher_confidence_claims_the_truth() {
        let t = det(LesionClass::Microaneurysm, bx(0.5, 0.5, 0.2, 0.2), 1.0);
        let low = det(LesionClass::Microaneurysm, bx(0.5, 0.5, 0.2, 0.2), 0.8);
        let high = det(LesionClass::Microaneurysm, bx(0.52, 0.5, 0.2, 0.2), 0.9);
        let r = match_detections(&[low, high], &[t], 0.5);
        assert_eq!(r.per_class[0], Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].detection, 1);
    }

    #[test]
    fn class_mismatch_is_fp_and_fn() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let r = match_detections(
            &[det(LesionClass::Irma, b, 1.0)],
            &[det(LesionClass::VenousBeading, b, 1.0)],
            0.5,
        );
        let t = r.total();
        assert_eq!((t.tp, t.fp, t.fn_), (0, 1, 1));
    }

    #[test]
    fn metric_arithmetic() {
        let m = prf(&Counts { tp: 3, fp: 1, fn_: 2 });
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        assert!((m.f1 - 0.666_666_666_666_666_6).abs() < 1e-12);
        let z = prf(&Counts::default());
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn report_serializes_with_fn_field() {
        let r = detection_metrics(&MatchResult::default(), 0.5);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v["micro"].get("fn").is_some());
        assert_eq!(v["per_class"].as_array().unwrap().len(), 7);
        assert!(r.to_text().contains("MICROANEURYSM"));
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0..3i64, 0.1..0.9f64, 0.1..0.9f64, 0.05..0.3f64, 0.05..0.3f64, 0.0..=1.0f64).prop_map(
            |(c, cx, cy, w, h, conf)| det(LesionClass::from_id(c).unwrap(), bx(cx, cy, w, h), conf),
        )
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_det(), b in arb_det()) {
            let x = iou(&a.bbox, &b.bbox);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, iou(&b.bbox, &a.bbox));
            prop_assert!((iou(&a.bbox, &a.bbox) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matching_invariants(dets in proptest::collection::vec(arb_det(), 0..15),
                               truth in proptest::collection::vec(arb_det(), 0..15),
                               thr in 0.05..=1.0f64) {
            let r = match_detections(&dets, &truth, thr);
            let mut seen = std::collections::HashSet::new();
            for p in &r.pairs {
                prop_assert!(seen.insert(p.truth));
                prop_assert!(p.iou >= thr);
            }
            for c in LesionClass::ALL {
                let k = &r.per_class[c.id()];
                let n_truth = truth.iter().filter(|t| t.lesion_class == c).count();
                let n_det = dets.iter().filter(|t| t.lesion_class == c).count();
                prop_assert_eq!(k.tp + k.fn_, n_truth);
                prop_assert_eq!(k.tp + k.fp, n_det);
            }
        }
    }
}
