//! Diabetic retinopathy grading from lesion detections.
//!
//! Stages: an external (or oracle) lesion detector produces per-image boxes,
//! [`features`] turns them into per-class counts and preprocesses them, and
//! [`svm`] grades the result with a one-vs-one SVM trained by SMO.
//! [`pipeline`] wires the stages into a reproducible training run.

pub mod dataset;
pub mod deteval;
pub mod detector;
pub mod domain;
pub mod features;
pub mod pipeline;
pub mod reference;
pub mod svm;

pub use domain::{grade_from_int, severity_max, BBox, Detection, DomainError, DrGrade, GradedRecord, Laterality, LesionClass};
