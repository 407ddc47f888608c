//! Hyperparameter grid search with stratified k-fold cross-validation.

use crate::domain::DrGrade;
use crate::svm::{scale_gamma, train_multiclass, Kernel, SvmError, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// RBF width: a fixed value or the "scale" heuristic resolved on the data
/// each model is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum Gamma {
    Scale,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<GammaRepr> for Gamma {
    type Error = String;
    fn try_from(r: GammaRepr) -> Result<Self, String> {
        match r {
            GammaRepr::Name(s) if s == "scale" => Ok(Gamma::Scale),
            GammaRepr::Name(s) => Err(format!("unknown gamma `{s}` (expected \"scale\" or a number)")),
            GammaRepr::Value(v) if v > 0.0 && v.is_finite() => Ok(Gamma::Value(v)),
            GammaRepr::Value(v) => Err(format!("gamma must be positive, got {v}")),
        }
    }
}

impl From<Gamma> for GammaRepr {
    fn from(g: Gamma) -> Self {
        match g {
            Gamma::Scale => GammaRepr::Name("scale".into()),
            Gamma::Value(v) => GammaRepr::Value(v),
        }
    }
}

impl Gamma {
    pub fn resolve(&self, x: &[Vec<f64>]) -> f64 {
        match self {
            Gamma::Scale => scale_gamma(x),
            Gamma::Value(v) => *v,
        }
    }
}

impl std::fmt::Display for Gamma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gamma::Scale => f.write_str("scale"),
            Gamma::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmGrid {
    pub c: Vec<f64>,
    pub gamma: Vec<Gamma>,
    pub kernel: Vec<KernelKind>,
}

impl Default for SvmGrid {
    fn default() -> Self {
        SvmGrid {
            c: vec![0.1, 1.0, 10.0, 100.0],
            gamma: vec![Gamma::Scale, Gamma::Value(0.01), Gamma::Value(0.1), Gamma::Value(1.0)],
            kernel: vec![KernelKind::Rbf],
        }
    }
}

impl SvmGrid {
    pub fn validate(&self) -> Result<(), SvmError> {
        if self.c.is_empty() || self.kernel.is_empty() {
            return Err(SvmError::Config("grid needs at least one C and one kernel".into()));
        }
        if self.kernel.contains(&KernelKind::Rbf) && self.gamma.is_empty() {
            return Err(SvmError::Config("RBF grid needs at least one gamma".into()));
        }
        if let Some(c) = self.c.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(SvmError::Config(format!("grid C must be positive, got {c}")));
        }
        Ok(())
    }

    /// Grid points in kernel, C, gamma order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &kernel in &self.kernel {
            for &c in &self.c {
                match kernel {
                    KernelKind::Linear => out.push(GridPoint { kernel, c, gamma: None }),
                    KernelKind::Rbf => out.extend(self.gamma.iter().map(|&g| GridPoint { kernel, c, gamma: Some(g) })),
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub kernel: KernelKind,
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Gamma>,
}

impl GridPoint {
    pub fn kernel_for(&self, x: &[Vec<f64>]) -> Kernel {
        match self.kernel {
            KernelKind::Linear => Kernel::Linear,
            KernelKind::Rbf => Kernel::Rbf {
                gamma: self.gamma.unwrap_or(Gamma::Scale).resolve(x),
            },
        }
    }

    pub fn train_config(&self, x: &[Vec<f64>], solver: &SolverSettings) -> TrainConfig {
        TrainConfig {
            c: self.c,
            kernel: self.kernel_for(x),
            tol: solver.tol,
            max_passes: solver.max_passes,
            seed: solver.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        SolverSettings {
            tol: d.tol,
            max_passes: d.max_passes,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub point: GridPoint,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Assigns each sample a fold in `0..k` so every grade is spread evenly.
pub fn stratified_folds(grades: &[DrGrade], k: usize, seed: u64) -> Result<Vec<usize>, SvmError> {
    if k < 2 {
        return Err(SvmError::Config(format!("cv_folds must be at least 2, got {k}")));
    }
    let mut fold = vec![0usize; grades.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut smallest: Option<(DrGrade, usize)> = None;
    for g in DrGrade::ALL {
        let mut idx: Vec<usize> = (0..grades.len()).filter(|&i| grades[i] == g).collect();
        if idx.is_empty() {
            continue;
        }
        if smallest.is_none_or(|(_, n)| idx.len() < n) {
            smallest = Some((g, idx.len()));
        }
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    match smallest {
        Some((g, n)) if n < k => Err(SvmError::Config(format!(
            "cv_folds = {k} exceeds the {n} training sample(s) of grade {g}; use cv_folds <= {n}"
        ))),
        None => Err(SvmError::Config("no samples to cross-validate".into())),
        _ => Ok(fold),
    }
}

/// Mean stratified k-fold accuracy of every grid point on the training
/// split. The winner has the highest mean; ties go to the smaller C, then
/// the smaller gamma (as resolved on the whole of `x`), then the earlier
/// grid point.
pub fn grid_search(
    x: &[Vec<f64>],
    y: &[DrGrade],
    grid: &SvmGrid,
    cv_folds: usize,
    solver: &SolverSettings,
) -> Result<(GridPoint, Vec<CvRow>), SvmError> {
    grid.validate()?;
    if x.len() != y.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    let fold = stratified_folds(y, cv_folds, solver.seed)?;
    let rows = grid
        .points()
        .into_par_iter()
        .map(|point| {
            let fold_accuracy = (0..cv_folds)
                .map(|f| {
                    let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
                    for i in 0..x.len() {
                        if fold[i] == f {
                            vx.push(x[i].clone());
                            vy.push(y[i]);
                        } else {
                            tx.push(x[i].clone());
                            ty.push(y[i]);
                        }
                    }
                    let model = train_multiclass(&tx, &ty, &point.train_config(&tx, solver))?;
                    let mut correct = 0;
                    for (v, t) in vx.iter().zip(&vy) {
                        if model.predict(v)?.grade == *t {
                            correct += 1;
                        }
                    }
                    Ok(correct as f64 / vx.len() as f64)
                })
                .collect::<Result<Vec<f64>, SvmError>>()?;
            let k = fold_accuracy.len() as f64;
            let mean = fold_accuracy.iter().sum::<f64>() / k;
            let var = fold_accuracy.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k;
            Ok(CvRow {
                point,
                fold_accuracy,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
            })
        })
        .collect::<Result<Vec<CvRow>, SvmError>>()?;
    let gamma_of = |p: &GridPoint| p.gamma.map_or(0.0, |g| g.resolve(x));
    let best = rows
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            b.mean_accuracy
                .total_cmp(&a.mean_accuracy)
                .then(a.point.c.total_cmp(&b.point.c))
                .then(gamma_of(&a.point).total_cmp(&gamma_of(&b.point)))
                .then(i.cmp(j))
        })
        .map(|(_, r)| r.point)
        .expect("grid is non-empty");
    Ok((best, rows))
}

/// `kernel,c,gamma,mean_accuracy,std_accuracy,fold_1..fold_k`
pub fn cv_table_csv(rows: &[CvRow]) -> String {
    let k = rows.first().map_or(0, |r| r.fold_accuracy.len());
    let mut s = String::from("kernel,c,gamma,mean_accuracy,std_accuracy");
    for f in 1..=k {
        let _ = write!(s, ",fold_{f}");
    }
    s.push('\n');
    for r in rows {
        let kernel = match r.point.kernel {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
        };
        let gamma = r.point.gamma.map(|g| g.to_string()).unwrap_or_default();
        let _ = write!(s, "{kernel},{},{gamma},{},{}", r.point.c, r.mean_accuracy, r.std_accuracy);
        for a in &r.fold_accuracy {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use DrGrade::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<DrGrade>) {
        let mut x = vec![];
        let mut y = vec![];
        for g in 0..3 {
            for i in 0..6 {
                x.push(vec![g as f64 * 3.0 + i as f64 * 0.1, (i % 2) as f64]);
                y.push(DrGrade::ALL[g]);
            }
        }
        (x, y)
    }

    #[test]
    fn gamma_serde() {
        let g: Vec<Gamma> = serde_json::from_str(r#"["scale", 0.5]"#).unwrap();
        assert_eq!(g, vec![Gamma::Scale, Gamma::Value(0.5)]);
        assert_eq!(serde_json::to_string(&g).unwrap(), r#"["scale",0.5]"#);
        assert!(serde_json::from_str::<Gamma>(r#""auto""#).is_err());
        assert!(serde_json::from_str::<Gamma>("-1").is_err());
    }

    #[test]
    fn default_grid_has_sixteen_points() {
        assert_eq!(SvmGrid::default().points().len(), 16);
    }

    #[test]
    fn folds_are_stratified() {
        let (_, y) = toy();
        let f = stratified_folds(&y, 3, 1).unwrap();
        for g in [NoDr, Mild, Moderate] {
            for k in 0..3 {
                let n = (0..y.len()).filter(|&i| y[i] == g && f[i] == k).count();
                assert_eq!(n, 2);
            }
        }
        let e = stratified_folds(&y, 7, 1).unwrap_err().to_string();
        assert!(e.contains("cv_folds <= 6"), "{e}");
    }

    #[test]
    fn single_point_grid() {
        let (x, y) = toy();
        let grid = SvmGrid { c: vec![1.0], gamma: vec![Gamma::Value(0.5)], kernel: vec![KernelKind::Rbf] };
        let (best, rows) = grid_search(&x, &y, &grid, 3, &SolverSettings::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(best, grid.points()[0]);
        assert_eq!(rows[0].mean_accuracy, 1.0);
    }

    #[test]
    fn ties_prefer_small_c_then_small_gamma_then_first() {
        let (x, y) = toy();
        let grid = SvmGrid {
            c: vec![10.0, 1.0],
            gamma: vec![Gamma::Value(1.0), Gamma::Value(0.5)],
            kernel: vec![KernelKind::Rbf],
        };
        let (best, rows) = grid_search(&x, &y, &grid, 3, &SolverSettings::default()).unwrap();
        assert!(rows.iter().all(|r| r.mean_accuracy == 1.0));
        assert_eq!(best, GridPoint { kernel: KernelKind::Rbf, c: 1.0, gamma: Some(Gamma::Value(0.5)) });

        let dup = SvmGrid { c: vec![1.0, 1.0], gamma: vec![Gamma::Value(0.5)], kernel: vec![KernelKind::Rbf] };
        let (best, rows) = grid_search(&x, &y, &dup, 3, &SolverSettings::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(best, dup.points()[0]);
    }

    #[test]
    fn cv_table_layout() {
        let (x, y) = toy();
        let grid = SvmGrid { c: vec![1.0], gamma: vec![Gamma::Scale], kernel: vec![KernelKind::Rbf, KernelKind::Linear] };
        let (_, rows) = grid_search(&x, &y, &grid, 2, &SolverSettings::default()).unwrap();
        let csv = cv_table_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kernel,c,gamma,mean_accuracy,std_accuracy,fold_1,fold_2");
        assert!(lines[1].starts_with("rbf,1,scale,"));
        assert!(lines[2].starts_with("linear,1,,"));
    }
}
