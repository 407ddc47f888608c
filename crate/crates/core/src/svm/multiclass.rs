//! One-vs-one multiclass wrapper.

use super::smo::{smo_train_binary, BinarySvm, TrainConfig};
use super::SvmError;
use crate::domain::DrGrade;
use crate::features::{FeatureSchema, PreprocessParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Machine for one class pair; a non-negative decision votes for `positive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMachine {
    pub positive: DrGrade,
    pub negative: DrGrade,
    pub machine: BinarySvm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    /// Free-form summary of the training run (accuracy figures etc.).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_summary: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub schema_version: u32,
    /// Present grades in ascending order.
    pub classes: Vec<DrGrade>,
    /// One machine per unordered pair, in lexicographic class order.
    pub pairwise: Vec<PairMachine>,
    pub preprocess: PreprocessParams,
    /// How raw inputs were built, for count-based models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureSchema>,
    #[serde(default)]
    pub metadata: ModelMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub grade: DrGrade,
    /// Indexed by grade id; absent grades stay at zero.
    pub votes: [u32; DrGrade::COUNT],
    /// Sum of `|f|` over the pairs each grade won.
    pub scores: [f64; DrGrade::COUNT],
}

/// Trains one binary machine per pair of present grades, each on that pair's
/// samples only. The returned model carries identity preprocessing for the
/// input dimension.
pub fn train_multiclass(x: &[Vec<f64>], grades: &[DrGrade], cfg: &TrainConfig) -> Result<SvmModel, SvmError> {
    cfg.validate()?;
    if x.len() != grades.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            found: grades.len(),
        });
    }
    let mut classes: Vec<DrGrade> = grades.to_vec();
    classes.sort();
    classes.dedup();
    for g in DrGrade::ALL {
        if !classes.contains(&g) {
            log::warn!("grade {g} has no training samples; excluded from the model");
        }
    }
    if classes.len() < 2 {
        return Err(SvmError::Train(format!(
            "need at least two distinct grades, found {}",
            classes.len()
        )));
    }
    let dim = x[0].len();
    let mut pairs = Vec::new();
    for (a, &pos) in classes.iter().enumerate() {
        for &neg in &classes[a + 1..] {
            pairs.push((pos, neg));
        }
    }
    let pairwise = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(pos, neg))| {
            let (px, py): (Vec<Vec<f64>>, Vec<f64>) = x
                .iter()
                .zip(grades)
                .filter(|(_, g)| **g == pos || **g == neg)
                .map(|(r, g)| (r.clone(), if *g == pos { 1.0 } else { -1.0 }))
                .unzip();
            let pair_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ..*cfg
            };
            let sol = smo_train_binary(&px, &py, &pair_cfg)?;
            if !sol.converged {
                log::warn!("pair {pos}/{neg}: SMO stopped before reaching tol (gap {:e})", sol.gap);
            }
            Ok(PairMachine {
                positive: pos,
                negative: neg,
                machine: sol.model,
            })
        })
        .collect::<Result<Vec<_>, SvmError>>()?;
    Ok(SvmModel {
        schema_version: MODEL_SCHEMA_VERSION,
        classes,
        pairwise,
        preprocess: PreprocessParams::identity(dim),
        features: None,
        metadata: ModelMetadata {
            train_config: Some(*cfg),
            ..Default::default()
        },
    })
}

/// Winner: most votes, then largest score, then the more severe grade.
pub fn vote(classes: &[DrGrade], decisions: &[(DrGrade, DrGrade, f64)]) -> Prediction {
    let mut votes = [0u32; DrGrade::COUNT];
    let mut scores = [0.0f64; DrGrade::COUNT];
    for &(pos, neg, f) in decisions {
        let winner = if f >= 0.0 { pos } else { neg };
        votes[winner.id()] += 1;
        scores[winner.id()] += f.abs();
    }
    let grade = classes
        .iter()
        .copied()
        .max_by(|a, b| {
            votes[a.id()]
                .cmp(&votes[b.id()])
                .then(scores[a.id()].total_cmp(&scores[b.id()]))
                .then(a.cmp(b))
        })
        .expect("model has classes");
    Prediction { grade, votes, scores }
}

impl SvmModel {
    pub fn feature_dim(&self) -> usize {
        self.preprocess.output_dim()
    }

    pub fn kernel(&self) -> Option<super::Kernel> {
        self.pairwise.first().map(|p| p.machine.kernel)
    }

    pub fn c(&self) -> Option<f64> {
        self.pairwise.first().map(|p| p.machine.c)
    }

    pub fn with_preprocess(mut self, preprocess: PreprocessParams) -> Self {
        self.preprocess = preprocess;
        self
    }

    /// Raw pairwise decision values for an already preprocessed vector.
    pub fn decisions(&self, x: &[f64]) -> Result<Vec<(DrGrade, DrGrade, f64)>, SvmError> {
        if x.len() != self.feature_dim() {
            return Err(SvmError::Dimension {
                expected: self.feature_dim(),
                found: x.len(),
            });
        }
        self.pairwise
            .iter()
            .map(|p| Ok((p.positive, p.negative, p.machine.decision(x)?)))
            .collect()
    }

    /// Predicts from an already preprocessed vector.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction, SvmError> {
        Ok(vote(&self.classes, &self.decisions(x)?))
    }

    /// Applies the stored preprocessing, then predicts.
    pub fn predict_raw(&self, counts: &[f64]) -> Result<Prediction, SvmError> {
        let x = self
            .preprocess
            .transform(counts)
            .map_err(|e| SvmError::Domain(e.to_string()))?;
        self.predict(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svm::Kernel;
    use DrGrade::*;

    fn constant(bias: f64) -> BinarySvm {
        BinarySvm {
            support_vectors: vec![],
            dual_coefs: vec![],
            bias,
            kernel: Kernel::Linear,
            c: 1.0,
        }
    }

    fn model_from(classes: Vec<DrGrade>, outcomes: &[(DrGrade, DrGrade, f64)]) -> SvmModel {
        SvmModel {
            schema_version: MODEL_SCHEMA_VERSION,
            classes,
            pairwise: outcomes
                .iter()
                .map(|&(p, n, b)| PairMachine { positive: p, negative: n, machine: constant(b) })
                .collect(),
            preprocess: PreprocessParams::identity(1),
            features: None,
            metadata: ModelMetadata::default(),
        }
    }

    #[test]
    fn simple_vote_count() {
        let m = model_from(vec![NoDr, Mild, Moderate], &[(NoDr, Mild, 1.0), (NoDr, Moderate, 1.0), (Mild, Moderate, 1.0)]);
        let p = m.predict(&[0.0]).unwrap();
        assert_eq!(p.grade, NoDr);
        assert_eq!(p.votes[0], 2);
        assert_eq!(p.votes[1], 1);
    }

    #[test]
    fn exact_tie_goes_to_more_severe() {
        let m = model_from(
            vec![Mild, Moderate, Severe, ProliferativeDr],
            &[
                (Mild, Moderate, -1.0),
                (Mild, Severe, -1.0),
                (Mild, ProliferativeDr, 1.0),
                (Moderate, Severe, -1.0),
                (Moderate, ProliferativeDr, 1.0),
                (Severe, ProliferativeDr, -1.0),
            ],
        );
        let p = m.predict(&[0.0]).unwrap();
        assert_eq!(p.votes[Moderate.id()], 2);
        assert_eq!(p.votes[Severe.id()], 2);
        assert_eq!(p.scores[Moderate.id()], p.scores[Severe.id()]);
        assert_eq!(p.grade, Severe);
    }

    #[test]
    fn vote_tie_broken_by_score() {
        let m = model_from(
            vec![NoDr, Mild, Moderate],
            &[(NoDr, Mild, 2.0), (NoDr, Moderate, -0.5), (Mild, Moderate, 0.5)],
        );
        // Cyclic: each wins once; NoDr has the largest margin.
        assert_eq!(m.predict(&[0.0]).unwrap().grade, NoDr);
    }

    #[test]
    fn pair_counts_and_absent_grades() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let two: Vec<DrGrade> = (0..10).map(|i| if i < 5 { NoDr } else { Severe }).collect();
        let cfg = TrainConfig { kernel: Kernel::Linear, ..Default::default() };
        let m = train_multiclass(&x, &two, &cfg).unwrap();
        assert_eq!(m.pairwise.len(), 1);
        assert_eq!(m.classes, vec![NoDr, Severe]);

        let x: Vec<Vec<f64>> = (0..25).map(|i| vec![(i / 5) as f64, (i % 5) as f64 * 0.01]).collect();
        let five: Vec<DrGrade> = (0..25).map(|i| DrGrade::ALL[i / 5]).collect();
        let m = train_multiclass(&x, &five, &cfg).unwrap();
        assert_eq!(m.pairwise.len(), 10);

        let one = vec![Mild; 10];
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        assert!(matches!(train_multiclass(&xs, &one, &cfg), Err(SvmError::Train(_))));
        assert!(matches!(
            m.predict(&[1.0]),
            Err(SvmError::Dimension { expected: 2, found: 1 })
        ));
    }
}
