//! Count features and the preprocessing chain (select, scale, project).

use crate::domain::{Detection, LesionClass};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Standard-deviation floor applied by the scaler.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("need at least {need} rows to fit, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("rows have inconsistent dimension: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("k = {k} is outside 1..={d}")]
    BadK { k: usize, d: usize },
    #[error("feature selection needs at least two distinct labels")]
    SingleLabel,
    #[error("variance target {0} must lie in (0, 1]")]
    BadTarget(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    #[default]
    Raw,
    ConfidenceWeighted,
}

/// Which lesion classes, in which order and how counted, make up a raw
/// feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub lesion_classes: Vec<LesionClass>,
    #[serde(default)]
    pub count_mode: CountMode,
}

/// Counts detections per active class. Detections whose class is not in
/// `class_subset` are not counted; the number of such detections is returned
/// alongside the vector.
pub fn extract_counts(
    image_id: &str,
    detections: &[Detection],
    class_subset: &[LesionClass],
    mode: CountMode,
) -> (FeatureVector, usize) {
    let mut values = vec![0.0; class_subset.len()];
    let mut ignored = 0;
    for d in detections {
        match class_subset.iter().position(|c| *c == d.lesion_class) {
            Some(i) => {
                values[i] += match mode {
                    CountMode::Raw => 1.0,
                    CountMode::ConfidenceWeighted => d.confidence,
                }
            }
            None => ignored += 1,
        }
    }
    if ignored > 0 {
        log::warn!("{image_id}: {ignored} detection(s) outside the active class subset were not counted");
    }
    (
        FeatureVector {
            image_id: image_id.to_string(),
            values,
        },
        ignored,
    )
}

fn check_rows(rows: &[Vec<f64>], need: usize) -> Result<usize, FeatureError> {
    if rows.len() < need {
        return Err(FeatureError::TooFewRows { need, got: rows.len() });
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(FeatureError::Dimension {
            expected: d,
            found: r.len(),
        });
    }
    Ok(d)
}

fn column_means(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Per-feature standardization with population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    /// Already floored at [`VARIANCE_FLOOR`].
    pub stds: Vec<f64>,
}

pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<Scaler, FeatureError> {
    let d = check_rows(rows, 2)?;
    let means = column_means(rows, d);
    let n = rows.len() as f64;
    let stds = (0..d)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(VARIANCE_FLOOR)
        })
        .collect();
    Ok(Scaler { means, stds })
}

impl Scaler {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// One-way ANOVA F statistic of each feature against the labels.
///
/// Features with zero total variance score 0. A feature whose groups are
/// internally constant but differ in mean scores `+inf`.
pub fn anova_f_scores(rows: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>, FeatureError> {
    let d = check_rows(rows, 2)?;
    if labels.len() != rows.len() {
        return Err(FeatureError::Dimension {
            expected: rows.len(),
            found: labels.len(),
        });
    }
    let mut groups: Vec<usize> = labels.to_vec();
    groups.sort_unstable();
    groups.dedup();
    let g = groups.len();
    if g < 2 {
        return Err(FeatureError::SingleLabel);
    }
    let n = rows.len();
    let grand = column_means(rows, d);
    let mut scores = Vec::with_capacity(d);
    for j in 0..d {
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for &label in &groups {
            let members: Vec<f64> = rows
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == label)
                .map(|(r, _)| r[j])
                .collect();
            let m = members.iter().sum::<f64>() / members.len() as f64;
            ssb += members.len() as f64 * (m - grand[j]).powi(2);
            ssw += members.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        }
        let f = if ssb + ssw <= 0.0 {
            0.0
        } else if ssw <= 0.0 || n == g {
            f64::INFINITY
        } else {
            (ssb / (g - 1) as f64) / (ssw / (n - g) as f64)
        };
        scores.push(f);
    }
    Ok(scores)
}

/// Indices (ascending) of the `k` features with the highest F score; ties go
/// to the lower index.
pub fn select_features(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<usize>, FeatureError> {
    let d = check_rows(rows, 2)?;
    if k < 1 || k > d {
        return Err(FeatureError::BadK { k, d });
    }
    let scores = anova_f_scores(rows, labels)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaTarget {
    Components(usize),
    /// Smallest number of components whose explained-variance ratio reaches the target.
    Variance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// k × d, rows orthonormal, each row's largest-magnitude entry positive.
    pub components: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    /// Explained-variance ratio of each kept component.
    pub explained_ratio: Vec<f64>,
}

pub fn fit_pca(rows: &[Vec<f64>], target: PcaTarget) -> Result<Pca, FeatureError> {
    let d = check_rows(rows, 2)?;
    match target {
        PcaTarget::Components(k) if k < 1 || k > d => return Err(FeatureError::BadK { k, d }),
        PcaTarget::Variance(t) if !(t > 0.0 && t <= 1.0) => return Err(FeatureError::BadTarget(t)),
        _ => {}
    }
    let n = rows.len() as f64;
    let means = column_means(rows, d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for a in 0..d {
            let da = r[a] - means[a];
            for b in a..d {
                cov[(a, b)] += da * (r[b] - means[b]) / n;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let ratios: Vec<f64> = values
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();

    let k = match target {
        PcaTarget::Components(k) => k,
        PcaTarget::Variance(t) => {
            let mut acc = 0.0;
            let mut k = d;
            for (i, r) in ratios.iter().enumerate() {
                acc += r;
                if acc >= t - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            if total <= 0.0 {
                1
            } else {
                k
            }
        }
    };

    let components = order[..k]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(Pca {
        components,
        means,
        explained_ratio: ratios[..k].to_vec(),
    })
}

impl Pca {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v.iter().zip(&self.means)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    /// Maps projected coordinates back to the input space (without re-adding means).
    pub fn inverse_centered(&self, z: &[f64]) -> Vec<f64> {
        let d = self.means.len();
        let mut out = vec![0.0; d];
        for (c, zi) in self.components.iter().zip(z) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += zi * w;
            }
        }
        out
    }
}

/// Which preprocessing stages to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub select_k: Option<usize>,
    #[serde(default = "yes")]
    pub scale: bool,
    #[serde(default)]
    pub pca: Option<PcaTarget>,
}

fn yes() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            select_k: None,
            scale: true,
            pca: None,
        }
    }
}

/// Fitted preprocessing, applied in the fixed order select → scale → PCA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub input_dim: usize,
    pub selected_indices: Vec<usize>,
    pub scaler: Option<Scaler>,
    pub pca: Option<Pca>,
    pub variance_floor: f64,
}

impl PreprocessParams {
    pub fn identity(dim: usize) -> Self {
        PreprocessParams {
            input_dim: dim,
            selected_indices: (0..dim).collect(),
            scaler: None,
            pca: None,
            variance_floor: VARIANCE_FLOOR,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.pca {
            Some(p) => p.components.len(),
            None => self.selected_indices.len(),
        }
    }

    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if v.len() != self.input_dim {
            return Err(FeatureError::Dimension {
                expected: self.input_dim,
                found: v.len(),
            });
        }
        let mut x: Vec<f64> = self.selected_indices.iter().map(|&i| v[i]).collect();
        if let Some(s) = &self.scaler {
            x = s.apply(&x);
        }
        if let Some(p) = &self.pca {
            x = p.apply(&x);
        }
        Ok(x)
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FeatureError> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

/// Fits every enabled stage on `rows` (the training split only).
pub fn fit_preprocess(
    rows: &[Vec<f64>],
    labels: &[usize],
    config: &PreprocessConfig,
) -> Result<PreprocessParams, FeatureError> {
    let d = check_rows(rows, 2)?;
    let selected_indices = match config.select_k {
        Some(k) => select_features(rows, labels, k)?,
        None => (0..d).collect(),
    };
    let mut x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| selected_indices.iter().map(|&i| r[i]).collect())
        .collect();
    let scaler = if config.scale {
        let s = fit_scaler(&x)?;
        x = x.iter().map(|r| s.apply(r)).collect();
        Some(s)
    } else {
        None
    };
    let pca = config.pca.map(|t| fit_pca(&x, t)).transpose()?;
    Ok(PreprocessParams {
        input_dim: d,
        selected_indices,
        scaler,
        pca,
        variance_floor: VARIANCE_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn d(c: LesionClass, conf: f64) -> Detection {
        Detection {
            lesion_class: c,
            bbox: BBox { cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 },
            confidence: conf,
        }
    }

    #[test]
    fn counts_over_full_taxonomy() {
        use LesionClass::*;
        let dets = [d(Microaneurysm, 1.0), d(Microaneurysm, 1.0), d(Hemorrhage, 1.0)];
        let (v, ignored) = extract_counts("x", &dets, &LesionClass::ALL, CountMode::Raw);
        assert_eq!(v.values, vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ignored, 0);
        let (v, _) = extract_counts("x", &[], &LesionClass::ALL, CountMode::Raw);
        assert_eq!(v.values, vec![0.0; 7]);
        let (v, _) = extract_counts("x", &[d(Microaneurysm, 0.5)], &LesionClass::ALL, CountMode::ConfidenceWeighted);
        assert_eq!(v.values[0], 0.5);
    }

    #[test]
    fn classes_outside_subset_are_ignored() {
        use LesionClass::*;
        let (v, ignored) = extract_counts("x", &[d(Irma, 1.0), d(Hemorrhage, 1.0)], &[Microaneurysm, Hemorrhage], CountMode::Raw);
        assert_eq!(v.values, vec![0.0, 1.0]);
        assert_eq!(ignored, 1);
    }

    #[test]
    fn scaler_hand_values() {
        let rows = vec![vec![2.0, 5.0], vec![4.0, 5.0], vec![6.0, 5.0]];
        let s = fit_scaler(&rows).unwrap();
        assert_eq!(s.means[0], 4.0);
        assert!((s.stds[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.stds[0] - 1.63299).abs() < 1e-5);
        let scaled: Vec<f64> = rows.iter().map(|r| s.apply(r)[0]).collect();
        for (a, b) in scaled.iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((a - b).abs() < 1e-5);
        }
        // Constant column collapses to zero.
        assert!(rows.iter().all(|r| s.apply(r)[1] == 0.0));
        assert_eq!(s.stds[1], VARIANCE_FLOOR);
        assert!(fit_scaler(&rows[..1]).is_err());
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn scaled_training_columns_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|j| rng.random_range(0.0..10.0) * (j + 1) as f64).collect()).collect();
        let s = fit_scaler(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r)).collect();
        for j in 0..4 {
            let m = scaled.iter().map(|r| r[j]).sum::<f64>() / 200.0;
            let v = scaled.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
        // Refitting on scaled data is (numerically) the identity transform.
        let again = fit_scaler(&scaled).unwrap();
        for r in &scaled {
            for (a, b) in again.apply(r).iter().zip(r) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Direct textbook F computation used as an independent check.
    fn brute_f(col: &[f64], labels: &[usize]) -> f64 {
        let n = col.len() as f64;
        let grand = col.iter().sum::<f64>() / n;
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort();
        classes.dedup();
        let k = classes.len() as f64;
        let (mut between, mut within) = (0.0, 0.0);
        for c in classes {
            let xs: Vec<f64> = col.iter().zip(labels).filter(|p| *p.1 == c).map(|p| *p.0).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            between += xs.len() as f64 * (m - grand) * (m - grand);
            within += xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        (between / (k - 1.0)) / (within / (n - k))
    }

    #[test]
    fn anova_matches_brute_force() {
        let labels = vec![0, 0, 1, 1, 2, 2, 2];
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 3.0], vec![2.0, 1.0], vec![4.0, 2.0], vec![5.0, 2.5],
            vec![7.0, 1.0], vec![9.0, 3.0], vec![8.0, 2.0],
        ];
        let f = anova_f_scores(&rows, &labels).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            assert!((f[j] - brute_f(&col, &labels)).abs() < 1e-9 * f[j].max(1.0));
        }
    }

    #[test]
    fn label_column_ranks_first() {
        let labels = vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| vec![7.0, 1.0, l as f64, 3.0]).collect();
        assert_eq!(select_features(&rows, &labels, 1).unwrap(), vec![2]);
        assert_eq!(select_features(&rows, &labels, 4).unwrap(), vec![0, 1, 2, 3]);
        // Constant everywhere: ties resolve to the lowest index.
        let flat: Vec<Vec<f64>> = labels.iter().map(|_| vec![1.0, 1.0, 1.0]).collect();
        assert_eq!(select_features(&flat, &labels, 1).unwrap(), vec![0]);
        assert!(matches!(select_features(&flat, &labels, 4), Err(FeatureError::BadK { .. })));
        assert!(matches!(select_features(&flat, &[0; 10], 1), Err(FeatureError::SingleLabel)));
    }

    #[test]
    fn pca_collinear_points() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let p = fit_pca(&rows, PcaTarget::Components(1)).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-9);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.components[0][0] - s).abs() < 1e-9 && (p.components[0][1] - s).abs() < 1e-9);
        let p = fit_pca(&rows, PcaTarget::Variance(0.99)).unwrap();
        assert_eq!(p.components.len(), 1);
    }

    #[test]
    fn pca_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random(), rng.random::<f64>() * 3.0, rng.random::<f64>() - 2.0]).collect();
        let p = fit_pca(&rows, PcaTarget::Components(3)).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        for w in p.explained_ratio.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        for r in &rows {
            let back = p.inverse_centered(&p.apply(r));
            for j in 0..3 {
                assert!((back[j] - (r[j] - p.means[j])).abs() < 1e-8);
            }
        }
        // Decorrelated data projects onto the identity basis.
        let z: Vec<Vec<f64>> = rows.iter().map(|r| p.apply(r)).collect();
        let q = fit_pca(&z, PcaTarget::Components(3)).unwrap();
        for (i, c) in q.components.iter().enumerate() {
            assert!((c[i] - 1.0).abs() < 1e-8);
        }
        assert!(matches!(fit_pca(&rows, PcaTarget::Components(4)), Err(FeatureError::BadK { .. })));
    }

    #[test]
    fn pca_isotropic_cloud_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let p = fit_pca(&rows, PcaTarget::Components(1)).unwrap();
        assert!((p.explained_ratio[0] - 0.5).abs() < 0.05, "{}", p.explained_ratio[0]);
    }

    #[test]
    fn preprocess_chain_order() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let rows: Vec<Vec<f64>> = vec![
            vec![0.0, 9.0, 1.0], vec![0.0, 8.0, 1.0], vec![1.0, 9.0, 3.0],
            vec![1.0, 7.0, 4.0], vec![2.0, 9.0, 6.0], vec![2.0, 8.0, 5.0],
        ];
        let cfg = PreprocessConfig { select_k: Some(2), scale: true, pca: Some(PcaTarget::Components(2)) };
        let p = fit_preprocess(&rows, &labels, &cfg).unwrap();
        assert_eq!(p.selected_indices, vec![0, 2]);
        assert_eq!(p.output_dim(), 2);
        let out = p.transform(&rows[0]).unwrap();
        let manual = p.pca.as_ref().unwrap().apply(&p.scaler.as_ref().unwrap().apply(&[0.0, 1.0]));
        assert_eq!(out, manual);
        assert!(p.transform(&[1.0]).is_err());
        // Refit on the same rows gives identical params.
        assert_eq!(fit_preprocess(&rows, &labels, &cfg).unwrap(), p);
    }

    proptest::proptest! {
        #[test]
        fn counts_ignore_order(classes in proptest::collection::vec(0..7i64, 0..20), seed in proptest::prelude::any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut dets: Vec<Detection> = classes.iter().map(|&c| d(LesionClass::from_id(c).unwrap(), 1.0)).collect();
            let (a, _) = extract_counts("x", &dets, &LesionClass::ALL, CountMode::Raw);
            dets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (b, _) = extract_counts("x", &dets, &LesionClass::ALL, CountMode::Raw);
            proptest::prop_assert_eq!(a, b);
        }
    }
}
