//! Binary soft-margin SVM trained by sequential minimal optimization.
//!
//! Solves the dual
//!
//! ```text
//! max  W(a) = sum_i a_i - 1/2 sum_ij a_i a_j y_i y_j K(x_i, x_j)
//! s.t. 0 <= a_i <= C,  sum_i a_i y_i = 0
//! ```
//!
//! Each step updates one pair of multipliers along the equality constraint.
//! With `E_t = f(x_t) - y_t` (bias excluded), the first multiplier is the
//! point of `I_up` with the smallest error and the second the point of `I_low`
//! with the largest, i.e. the pair with maximal `|E_1 - E_2|`. Training stops
//! once that gap drops to `tol`.

use super::kernel::Kernel;
use super::SvmError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Curvatures at or below this are treated as flat.
const ETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub c: f64,
    pub kernel: Kernel,
    /// Stop when the maximal violating pair gap is at most `tol`.
    pub tol: f64,
    /// Iteration budget, in multiples of the number of samples.
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 1.0,
            kernel: Kernel::Rbf { gamma: 1.0 },
            tol: 1e-3,
            max_passes: 1000,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(SvmError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        self.kernel.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub kernel: Kernel,
    pub c: f64,
}

impl BinarySvm {
    pub fn dim(&self) -> Option<usize> {
        self.support_vectors.first().map(Vec::len)
    }

    /// `f(x) = sum_i coef_i K(sv_i, x) + b`.
    pub fn decision(&self, x: &[f64]) -> Result<f64, SvmError> {
        if let Some(d) = self.dim() {
            if d != x.len() {
                return Err(SvmError::Dimension {
                    expected: d,
                    found: x.len(),
                });
            }
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * self.kernel.eval_unchecked(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    /// Sign of the decision value; zero maps to `+1`.
    pub fn classify(&self, x: &[f64]) -> Result<i8, SvmError> {
        Ok(if self.decision(x)? >= 0.0 { 1 } else { -1 })
    }
}

/// Full solver output. `alphas` covers every training point, not only the
/// support vectors kept in `model`.
#[derive(Debug, Clone)]
pub struct SmoSolution {
    pub model: BinarySvm,
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal violating pair gap.
    pub gap: f64,
}

impl SmoSolution {
    pub fn dual_objective(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        dual_objective(&self.model.kernel, x, y, &self.alphas)
    }
}

pub fn dual_objective(kernel: &Kernel, x: &[Vec<f64>], y: &[f64], alphas: &[f64]) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alphas[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alphas[i] * alphas[j] * y[i] * y[j] * kernel.eval_unchecked(&x[i], &x[j]);
        }
    }
    alphas.iter().sum::<f64>() - 0.5 * quad
}

/// Multipliers within `1e-12 * C` of a bound are put exactly on it, so
/// rounding never leaves a bounded multiplier looking free.
fn snap_to_box(a: f64, c: f64) -> f64 {
    let eps = c * 1e-12;
    if a < eps {
        0.0
    } else if a > c - eps {
        c
    } else {
        a
    }
}

struct Solver<'a> {
    y: &'a [f64],
    k: Vec<f64>,
    n: usize,
    c: f64,
    alpha: Vec<f64>,
    /// `f_t` without bias.
    f: Vec<f64>,
}

impl Solver<'_> {
    #[inline]
    fn kij(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    #[inline]
    fn err(&self, t: usize) -> f64 {
        self.f[t] - self.y[t]
    }

    fn in_up(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] < self.c) || (self.y[t] < 0.0 && self.alpha[t] > 0.0)
    }

    fn in_low(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] > 0.0) || (self.y[t] < 0.0 && self.alpha[t] < self.c)
    }

    /// (i, j, gap): argmin of E over I_up and argmax of E over I_low.
    fn working_pair(&self) -> Option<(usize, usize, f64)> {
        let mut i = None;
        let mut j = None;
        for t in 0..self.n {
            let e = self.err(t);
            if self.in_up(t) && i.is_none_or(|(_, best)| e < best) {
                i = Some((t, e));
            }
            if self.in_low(t) && j.is_none_or(|(_, best)| e > best) {
                j = Some((t, e));
            }
        }
        let ((i, ei), (j, ej)) = (i?, j?);
        Some((i, j, ej - ei))
    }

    /// Optimizes the pair analytically. Returns false if neither multiplier moved.
    fn take_step(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ai, aj) = (self.alpha[i], self.alpha[j]);
        let c = self.c;
        let (lo, hi) = if yi != yj {
            ((aj - ai).max(0.0), (c + aj - ai).min(c))
        } else {
            ((ai + aj - c).max(0.0), (ai + aj).min(c))
        };
        if hi - lo <= 0.0 {
            return false;
        }
        let (ei, ej) = (self.err(i), self.err(j));
        let eta = self.kij(i, i) + self.kij(j, j) - 2.0 * self.kij(i, j);
        // The objective along the pair direction changes by
        // d * yj * (ei - ej) - eta * d^2 / 2 for a step d in aj.
        let slope = yj * (ei - ej);
        let aj_new = if eta > ETA_FLOOR {
            (aj + slope / eta).clamp(lo, hi)
        } else if slope > 0.0 {
            hi
        } else if slope < 0.0 {
            lo
        } else {
            return false;
        };
        let ai_new = snap_to_box(ai + yi * yj * (aj - aj_new), c);
        let aj_new = snap_to_box(aj_new, c);
        let (di, dj) = (ai_new - ai, aj_new - aj);
        if di == 0.0 && dj == 0.0 {
            return false;
        }
        self.alpha[i] = ai_new;
        self.alpha[j] = aj_new;
        for t in 0..self.n {
            self.f[t] += di * yi * self.kij(i, t) + dj * yj * self.kij(j, t);
        }
        true
    }

    fn refresh_f(&mut self) {
        for t in 0..self.n {
            self.f[t] = (0..self.n)
                .filter(|&s| self.alpha[s] != 0.0)
                .map(|s| self.alpha[s] * self.y[s] * self.kij(s, t))
                .sum();
        }
    }

    /// Average over free vectors, else midpoint of the feasible interval.
    fn bias(&self) -> f64 {
        let mut free_sum = 0.0;
        let mut free_n = 0usize;
        let mut lower = f64::NEG_INFINITY;
        let mut upper = f64::INFINITY;
        for t in 0..self.n {
            let v = self.y[t] - self.f[t];
            let a = self.alpha[t];
            if a > 0.0 && a < self.c {
                free_sum += v;
                free_n += 1;
            } else if (self.y[t] > 0.0) == (a == 0.0) {
                lower = lower.max(v);
            } else {
                upper = upper.min(v);
            }
        }
        if free_n > 0 {
            free_sum / free_n as f64
        } else if lower.is_finite() && upper.is_finite() {
            (lower + upper) / 2.0
        } else if lower.is_finite() {
            lower
        } else if upper.is_finite() {
            upper
        } else {
            0.0
        }
    }
}

/// Trains a binary machine on labels in `{-1, +1}`.
pub fn smo_train_binary(x: &[Vec<f64>], y: &[f64], cfg: &TrainConfig) -> Result<SmoSolution, SvmError> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    if let Some(bad) = y.iter().find(|v| **v != 1.0 && **v != -1.0) {
        return Err(SvmError::Train(format!("labels must be -1 or +1, found {bad}")));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(SvmError::Train("both labels -1 and +1 must be present".into()));
    }
    let d = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(SvmError::Dimension {
            expected: d,
            found: r.len(),
        });
    }

    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = cfg.kernel.eval_unchecked(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let mut s = Solver {
        y,
        k,
        n,
        c: cfg.c,
        alpha: vec![0.0; n],
        f: vec![0.0; n],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_iter = cfg.max_passes.max(1).saturating_mul(n);
    let mut iterations = 0;
    let mut converged = false;
    let mut gap = f64::INFINITY;

    while iterations < max_iter {
        let Some((i, j, g)) = s.working_pair() else {
            converged = true;
            gap = 0.0;
            break;
        };
        gap = g;
        if g <= cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        if s.take_step(i, j) {
            continue;
        }
        // Degenerate pair: try other violating partners for `i` in seeded random order.
        let ei = s.err(i);
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&t| t != j && s.in_low(t) && s.err(t) - ei > cfg.tol)
            .collect();
        candidates.shuffle(&mut rng);
        if !candidates.into_iter().any(|t| s.take_step(i, t)) {
            log::debug!("smo stalled at gap {g:e} after {iterations} iterations");
            break;
        }
    }

    // Recompute outputs from scratch before deriving the bias.
    s.refresh_f();
    if converged {
        gap = s.working_pair().map_or(0.0, |p| p.2);
    }
    let bias = s.bias();
    let (support_vectors, dual_coefs) = (0..n)
        .filter(|&t| s.alpha[t] > 0.0)
        .map(|t| (x[t].clone(), s.alpha[t] * y[t]))
        .unzip();
    Ok(SmoSolution {
        model: BinarySvm {
            support_vectors,
            dual_coefs,
            bias,
            kernel: cfg.kernel,
            c: cfg.c,
        },
        alphas: s.alpha,
        iterations,
        converged,
        gap,
    })
}

/// Largest KKT residual of a trained solution on its training set.
pub fn max_kkt_violation(sol: &SmoSolution, x: &[Vec<f64>], y: &[f64]) -> f64 {
    let c = sol.model.c;
    x.iter()
        .zip(y)
        .zip(&sol.alphas)
        .map(|((xi, yi), &a)| {
            let m = yi * sol.model.decision(xi).expect("training dimension");
            if a == 0.0 {
                (1.0 - m).max(0.0)
            } else if a == c {
                (m - 1.0).max(0.0)
            } else {
                (m - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}
