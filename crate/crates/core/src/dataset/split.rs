//! Seeded train/test partitioning.
//!
//! Shuffling uses ChaCha8 seeded through `SeedableRng::seed_from_u64` and the
//! Fisher-Yates shuffle from `rand::seq::SliceRandom`. Stratified splits
//! shuffle each grade's indices in grade order from one generator, so a given
//! seed yields the same partition on every platform.

use super::DatasetError;
use crate::domain::{DrGrade, GradedRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            seed: 42,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DatasetError::Split(format!(
                "test_fraction {} must lie strictly between 0 and 1",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Index-level split; both halves are returned in ascending index order.
pub fn split_indices(grades: &[DrGrade], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    spec.validate()?;
    if grades.is_empty() {
        return Err(DatasetError::Split("no records to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test = Vec::new();
    if spec.stratified {
        for grade in DrGrade::ALL {
            let mut idx: Vec<usize> = (0..grades.len()).filter(|&i| grades[i] == grade).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len();
            if n < 2 {
                return Err(DatasetError::Split(format!(
                    "grade {grade} has {n} sample(s); stratification needs at least one in each partition"
                )));
            }
            // Keep at least one sample of every present grade on each side.
            let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 1);
            idx.shuffle(&mut rng);
            test.extend_from_slice(&idx[..n_test]);
        }
    } else {
        let n = grades.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test.min(n)]);
    }
    test.sort_unstable();
    let mut in_test = vec![false; grades.len()];
    for &i in &test {
        in_test[i] = true;
    }
    let train = (0..grades.len()).filter(|&i| !in_test[i]).collect();
    Ok((train, test))
}

pub fn stratified_split(
    records: &[GradedRecord],
    spec: &SplitSpec,
) -> Result<(Vec<GradedRecord>, Vec<GradedRecord>), DatasetError> {
    let grades: Vec<DrGrade> = records.iter().map(|r| r.grade).collect();
    let (train, test) = split_indices(&grades, spec)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(train), pick(test)))
}
