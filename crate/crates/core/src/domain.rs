//! Shared vocabulary: lesion taxonomy, grade scale, boxes and detections.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("grade {0} is outside 0..=4")]
    GradeOutOfRange(i64),
    #[error("lesion class id {0} is outside 0..=6")]
    LesionOutOfRange(i64),
    #[error("unknown lesion class name `{0}`")]
    UnknownLesion(String),
    #[error("invalid box ({cx}, {cy}, {w}, {h}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
}

/// The seven lesion categories, in fixed id order.
///
/// Ids are stable across annotation files, feature columns and model files;
/// a dataset may use a subset but never renumbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LesionClass {
    Microaneurysm = 0,
    Hemorrhage = 1,
    HardExudate = 2,
    SoftExudate = 3,
    Irma = 4,
    VenousBeading = 5,
    Proliferative = 6,
}

impl LesionClass {
    pub const COUNT: usize = 7;

    pub const ALL: [LesionClass; 7] = [
        LesionClass::Microaneurysm,
        LesionClass::Hemorrhage,
        LesionClass::HardExudate,
        LesionClass::SoftExudate,
        LesionClass::Irma,
        LesionClass::VenousBeading,
        LesionClass::Proliferative,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: i64) -> Result<Self, DomainError> {
        usize::try_from(id)
            .ok()
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or(DomainError::LesionOutOfRange(id))
    }

    /// Canonical upper-case name used on the wire.
    pub fn name(self) -> &'static str {
        match self {
            LesionClass::Microaneurysm => "MICROANEURYSM",
            LesionClass::Hemorrhage => "HEMORRHAGE",
            LesionClass::HardExudate => "HARD_EXUDATE",
            LesionClass::SoftExudate => "SOFT_EXUDATE",
            LesionClass::Irma => "IRMA",
            LesionClass::VenousBeading => "VENOUS_BEADING",
            LesionClass::Proliferative => "PROLIFERATIVE",
        }
    }

    /// Short column name used in count tables.
    pub fn column(self) -> &'static str {
        match self {
            LesionClass::Microaneurysm => "ma",
            LesionClass::Hemorrhage => "hem",
            LesionClass::HardExudate => "he",
            LesionClass::SoftExudate => "se",
            LesionClass::Irma => "irma",
            LesionClass::VenousBeading => "vb",
            LesionClass::Proliferative => "prolif",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LesionClass {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s || c.column() == s)
            .ok_or_else(|| DomainError::UnknownLesion(s.to_string()))
    }
}

impl Serialize for LesionClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for LesionClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let id = i64::deserialize(d)?;
        LesionClass::from_id(id).map_err(serde::de::Error::custom)
    }
}

/// Five-level severity scale, ordered from no disease to proliferative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DrGrade {
    NoDr = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
    ProliferativeDr = 4,
}

impl DrGrade {
    pub const COUNT: usize = 5;

    pub const ALL: [DrGrade; 5] = [
        DrGrade::NoDr,
        DrGrade::Mild,
        DrGrade::Moderate,
        DrGrade::Severe,
        DrGrade::ProliferativeDr,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            DrGrade::NoDr => "No DR",
            DrGrade::Mild => "Mild DR",
            DrGrade::Moderate => "Moderate DR",
            DrGrade::Severe => "Severe DR",
            DrGrade::ProliferativeDr => "Proliferative DR",
        }
    }

    /// Referable disease: moderate or worse.
    pub fn is_referable(self) -> bool {
        self >= DrGrade::Moderate
    }
}

pub fn grade_from_int(v: i64) -> Result<DrGrade, DomainError> {
    usize::try_from(v)
        .ok()
        .and_then(|i| DrGrade::ALL.get(i).copied())
        .ok_or(DomainError::GradeOutOfRange(v))
}

/// The more severe of two grades.
pub fn severity_max(a: DrGrade, b: DrGrade) -> DrGrade {
    a.max(b)
}

impl fmt::Display for DrGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.id(), self.label())
    }
}

impl Serialize for DrGrade {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for DrGrade {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        grade_from_int(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Laterality {
    Left,
    Right,
    Unknown,
}

impl Laterality {
    /// Kaggle-style ids end in `_left` / `_right`.
    pub fn from_image_id(image_id: &str) -> Self {
        if image_id.ends_with("_left") {
            Laterality::Left
        } else if image_id.ends_with("_right") {
            Laterality::Right
        } else {
            Laterality::Unknown
        }
    }
}

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validating constructor.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, DomainError> {
        let b = BBox { cx, cy, w, h };
        b.validate().map(|_| b)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |reason| DomainError::InvalidBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            reason,
        };
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(err("center outside [0,1]"));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(err("size outside (0,1]"));
        }
        if self.clipped_area() <= 0.0 {
            return Err(err("no area inside the image"));
        }
        Ok(())
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// (x0, y0, x1, y1)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area of the part of the box inside the unit square.
    pub fn clipped_area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        let w = x1.min(1.0) - x0.max(0.0);
        let h = y1.min(1.0) - y0.max(0.0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// The box restricted to the unit square, or `None` if nothing remains.
    pub fn clipped(&self) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub lesion_class: LesionClass,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    /// A ground-truth annotation (confidence 1.0).
    pub fn truth(lesion_class: LesionClass, bbox: BBox) -> Self {
        Detection {
            lesion_class,
            bbox,
            confidence: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(DomainError::InvalidConfidence(self.confidence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradedRecord {
    pub image_id: String,
    pub grade: DrGrade,
    pub laterality: Laterality,
}

impl GradedRecord {
    pub fn new(image_id: impl Into<String>, grade: DrGrade) -> Self {
        let image_id = image_id.into();
        let laterality = Laterality::from_image_id(&image_id);
        GradedRecord {
            image_id,
            grade,
            laterality,
        }
    }
}
