//! YOLO-style annotation files: one box per line, `class cx cy w h [conf]`.

use super::DatasetError;
use crate::domain::{BBox, Detection, LesionClass};
use std::fmt::Write as _;
use std::path::Path;

pub fn read_annotation_file(path: &Path, image_id: &str) -> Result<Vec<Detection>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_annotations(&text).map_err(|(line, message)| DatasetError::Annotation {
        path: path.to_path_buf(),
        image_id: image_id.to_string(),
        line,
        message,
    })
}

/// Parses annotation text; on failure returns the 1-based line and reason.
pub fn parse_annotations(text: &str) -> Result<Vec<Detection>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err((line, format!("expected 5 or 6 fields, found {}", fields.len())));
        }
        let class_id: i64 = fields[0]
            .parse()
            .map_err(|_| (line, format!("bad class id `{}`", fields[0])))?;
        let lesion_class = LesionClass::from_id(class_id).map_err(|e| (line, e.to_string()))?;
        let mut nums = [0.0f64; 5];
        for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| (line, format!("bad number `{f}`")))?;
            if !slot.is_finite() {
                return Err((line, format!("non-finite number `{f}`")));
            }
        }
        let bbox = BBox {
            cx: nums[0],
            cy: nums[1],
            w: nums[2],
            h: nums[3],
        };
        bbox.validate().map_err(|e| (line, e.to_string()))?;
        let confidence = if fields.len() == 6 { nums[4] } else { 1.0 };
        if !(0.0..=1.0).contains(&confidence) {
            return Err((line, format!("confidence {confidence} outside [0,1]")));
        }
        out.push(Detection {
            lesion_class,
            bbox,
            confidence,
        });
    }
    Ok(out)
}

/// Renders detections with six fractional digits, LF-terminated.
pub fn format_annotations(detections: &[Detection], include_confidence: bool) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        let _ = write!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            d.lesion_class.id(),
            b.cx,
            b.cy,
            b.w,
            b.h
        );
        if include_confidence {
            let _ = write!(out, " {:.6}", d.confidence);
        }
        out.push('\n');
    }
    out
}

pub fn write_annotation_file(
    detections: &[Detection],
    path: &Path,
    include_confidence: bool,
) -> Result<(), DatasetError> {
    for d in detections {
        d.validate().map_err(|e| DatasetError::Invalid(e.to_string()))?;
    }
    std::fs::write(path, format_annotations(detections, include_confidence))
        .map_err(|e| DatasetError::io(path, e))
}
