//! Published headline figures for the original Kaggle + YOLOv8 setup.
//!
//! They are carried through reports as annotations only. Nothing in this
//! crate tries to reproduce or assert them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReference {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorReference {
    /// Undefined metric in the source (mAP vs image-level is not stated).
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
}

pub const CLASSIFIER_REFERENCE: ClassifierReference = ClassifierReference {
    train_accuracy: 0.91,
    test_accuracy: 0.84,
    f1: 0.81,
    precision: 0.82,
};

pub const DETECTOR_REFERENCE: DetectorReference = DetectorReference {
    accuracy: 0.78,
    f1: 0.74,
    precision: 0.72,
};
