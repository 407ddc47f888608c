//! Classification metrics.

use crate::domain::DrGrade;
use crate::reference::{ClassifierReference, CLASSIFIER_REFERENCE};
use crate::svm::{SvmError, SvmModel};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeMetrics {
    pub grade: DrGrade,
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of rows with this true grade.
    pub support: usize,
}

/// Referable (grade ≥ Moderate) vs non-referable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizedView {
    /// Rows = truth, cols = predicted; index 1 is referable.
    pub confusion: [[usize; 2]; 2],
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification report.
///
/// `confusion[t][p]` counts rows of true grade `t` predicted as `p`; its sum
/// is `n_test`, the number of rows scored in this report. `n_train` is the
/// size of the training split of the model being evaluated. Macro averages
/// run over the grades present in the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: [[usize; DrGrade::COUNT]; DrGrade::COUNT],
    pub accuracy: f64,
    pub per_class: Vec<GradeMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub binarized: BinarizedView,
    pub n_train: usize,
    pub n_test: usize,
    pub reference: ClassifierReference,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Builds a report from paired truth/prediction lists.
pub fn report_from_predictions(truth: &[DrGrade], predicted: &[DrGrade], n_train: usize) -> Result<EvalReport, SvmError> {
    if truth.is_empty() {
        return Err(SvmError::Domain("cannot evaluate an empty set".into()));
    }
    if truth.len() != predicted.len() {
        return Err(SvmError::Dimension {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let mut m = [[0usize; DrGrade::COUNT]; DrGrade::COUNT];
    for (t, p) in truth.iter().zip(predicted) {
        m[t.id()][p.id()] += 1;
    }
    Ok(report_from_confusion(m, n_train))
}

pub fn report_from_confusion(m: [[usize; DrGrade::COUNT]; DrGrade::COUNT], n_train: usize) -> EvalReport {
    let total: usize = m.iter().flatten().sum();
    let trace: usize = (0..DrGrade::COUNT).map(|i| m[i][i]).sum();
    let per_class: Vec<GradeMetrics> = DrGrade::ALL
        .iter()
        .map(|&g| {
            let i = g.id();
            let support: usize = m[i].iter().sum();
            let predicted: usize = m.iter().map(|row| row[i]).sum();
            let precision = ratio(m[i][i], predicted);
            let recall = ratio(m[i][i], support);
            GradeMetrics {
                grade: g,
                label: g.label().to_string(),
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            }
        })
        .collect();
    let present: Vec<&GradeMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let mean = |f: fn(&GradeMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let mut b = [[0usize; 2]; 2];
    for t in DrGrade::ALL {
        for p in DrGrade::ALL {
            b[t.is_referable() as usize][p.is_referable() as usize] += m[t.id()][p.id()];
        }
    }
    let bp = ratio(b[1][1], b[0][1] + b[1][1]);
    let br = ratio(b[1][1], b[1][0] + b[1][1]);
    EvalReport {
        confusion: m,
        accuracy: ratio(trace, total),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
        binarized: BinarizedView {
            confusion: b,
            accuracy: ratio(b[0][0] + b[1][1], total),
            precision: bp,
            recall: br,
            f1: f1(bp, br),
        },
        n_train,
        n_test: total,
        reference: CLASSIFIER_REFERENCE,
    }
}

/// Scores `model` on raw count rows (the model applies its own preprocessing).
pub fn evaluate(model: &SvmModel, features: &[Vec<f64>], truth: &[DrGrade]) -> Result<EvalReport, SvmError> {
    if features.is_empty() {
        return Err(SvmError::Domain("cannot evaluate an empty set".into()));
    }
    if features.len() != truth.len() {
        return Err(SvmError::Dimension {
            expected: features.len(),
            found: truth.len(),
        });
    }
    let predicted = features
        .iter()
        .map(|x| model.predict_raw(x).map(|p| p.grade))
        .collect::<Result<Vec<_>, _>>()?;
    let n_train = model
        .metadata
        .training_summary
        .as_ref()
        .and_then(|s| s.get("n_train"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;
    report_from_predictions(truth, &predicted, n_train)
}

impl EvalReport {
    pub fn to_text(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "rows scored: {}   training rows: {}", self.n_test, self.n_train);
        let _ = writeln!(s, "accuracy: {:.4}", self.accuracy);
        let _ = writeln!(
            s,
            "macro precision / recall / F1: {:.4} / {:.4} / {:.4}",
            self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "\nconfusion (rows = truth, cols = predicted)");
        let _ = writeln!(s, "{:>18} {:>5} {:>5} {:>5} {:>5} {:>5}", "", 0, 1, 2, 3, 4);
        for g in DrGrade::ALL {
            let row = &self.confusion[g.id()];
            let _ = writeln!(
                s,
                "{:>18} {:>5} {:>5} {:>5} {:>5} {:>5}",
                format!("{} {}", g.id(), g.label()),
                row[0],
                row[1],
                row[2],
                row[3],
                row[4]
            );
        }
        let _ = writeln!(s, "\n{:<18} {:>9} {:>9} {:>9} {:>8}", "grade", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        let b = &self.binarized;
        let _ = writeln!(
            s,
            "\nreferable (grade >= 2): accuracy {:.4}, precision {:.4}, recall {:.4}, F1 {:.4}",
            b.accuracy, b.precision, b.recall, b.f1
        );
        let r = &self.reference;
        let _ = writeln!(
            s,
            "\nreference (published, Kaggle + YOLOv8, not reproduced here): train accuracy {:.2}, test accuracy {:.2}, F1 {:.2}, precision {:.2}",
            r.train_accuracy, r.test_accuracy, r.f1, r.precision
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use DrGrade::*;

    #[test]
    fn hand_computed_three_class_matrix() {
        let mut m = [[0usize; 5]; 5];
        m[0][..3].copy_from_slice(&[2, 1, 0]);
        m[1][..3].copy_from_slice(&[0, 2, 0]);
        m[2][..3].copy_from_slice(&[0, 1, 2]);
        let r = report_from_confusion(m, 0);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert!((r.per_class[0].recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].precision, 0.5);
        assert_eq!(r.n_test, 8);
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![NoDr, Mild, Severe, Severe];
        let r = report_from_predictions(&t, &t, 10).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(r.confusion[i][j], 0);
                }
            }
        }
        let one = report_from_predictions(&[Mild, Mild], &[Mild, Mild], 0).unwrap();
        assert_eq!(one.macro_f1, 1.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(report_from_predictions(&[], &[], 0).is_err());
    }

    #[test]
    fn matrix_identities_on_random_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let t: Vec<DrGrade> = (0..n).map(|_| DrGrade::ALL[rng.random_range(0..5)]).collect();
            let p: Vec<DrGrade> = (0..n).map(|_| DrGrade::ALL[rng.random_range(0..5)]).collect();
            let r = report_from_predictions(&t, &p, 0).unwrap();
            let total: usize = r.confusion.iter().flatten().sum();
            assert_eq!(total, n);
            let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            assert_eq!(r.accuracy, correct as f64 / n as f64);
            for g in DrGrade::ALL {
                let tp = t.iter().zip(&p).filter(|(a, b)| **a == g && **b == g).count();
                let pred = p.iter().filter(|b| **b == g).count();
                let sup = t.iter().filter(|a| **a == g).count();
                let c = &r.per_class[g.id()];
                assert_eq!(c.precision, if pred == 0 { 0.0 } else { tp as f64 / pred as f64 });
                assert_eq!(c.recall, if sup == 0 { 0.0 } else { tp as f64 / sup as f64 });
            }
            let bin_total: usize = r.binarized.confusion.iter().flatten().sum();
            assert_eq!(bin_total, n);
        }
    }
}
