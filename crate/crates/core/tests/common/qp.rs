//! Dense projected-gradient solver for the SVM dual, used as an oracle.
//!
//! Minimizes `g(a) = a'Qa/2 - 1'a` with `Q_ij = y_i y_j K_ij` over
//! `{0 <= a <= C, y'a = 0}` using FISTA with adaptive restart. The projection
//! is computed by bisection on the multiplier of the equality constraint.

pub struct QpSolution {
    pub alphas: Vec<f64>,
    pub bias: f64,
    /// Dual objective `1'a - a'Qa/2`.
    pub objective: f64,
    pub iterations: usize,
}

pub fn linear(x: &[f64], z: &[f64]) -> f64 {
    x.iter().zip(z).map(|(a, b)| a * b).sum()
}

pub fn rbf(gamma: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |x, z| (-gamma * x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp()
}

fn project(z: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |nu: f64| -> Vec<f64> { z.iter().zip(y).map(|(zi, yi)| (zi - nu * yi).clamp(0.0, c)).collect() };
    let h = |a: &[f64]| -> f64 { a.iter().zip(y).map(|(ai, yi)| ai * yi).sum() };
    let bound = z.iter().fold(0.0f64, |m, v| m.max(v.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    // h is non-increasing in nu; h(lo) >= 0 >= h(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

fn objective(q: &[Vec<f64>], a: &[f64]) -> f64 {
    let n = a.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += a[i] * q[i][j] * a[j];
        }
    }
    a.iter().sum::<f64>() - 0.5 * quad
}

fn largest_eigenvalue(q: &[Vec<f64>]) -> f64 {
    let n = q.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

pub fn solve<K: Fn(&[f64], &[f64]) -> f64>(x: &[Vec<f64>], y: &[f64], c: f64, kernel: K) -> QpSolution {
    let n = x.len();
    let kmat: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| kernel(&x[i], &x[j])).collect()).collect();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * kmat[i][j]).collect()).collect();
    let lip = (largest_eigenvalue(&q) * 1.05).max(1e-3);
    let grad = |a: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| q[i][j] * a[j]).sum::<f64>() - 1.0).collect() };

    let mut a = vec![0.0; n];
    let mut prev = a.clone();
    let mut t = 1.0f64;
    let mut best = objective(&q, &a);
    let mut iterations = 0;
    for it in 0..1_000_000 {
        iterations = it + 1;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        let look: Vec<f64> = a.iter().zip(&prev).map(|(ai, pi)| ai + mom * (ai - pi)).collect();
        let g = grad(&look);
        let step: Vec<f64> = look.iter().zip(&g).map(|(l, gi)| l - gi / lip).collect();
        let next = project(&step, y, c);
        let obj = objective(&q, &next);
        prev = std::mem::replace(&mut a, next);
        if obj < best {
            // Objective went down (we maximize W): restart momentum.
            t = 1.0;
            prev = a.clone();
        } else {
            t = t_next;
        }
        best = best.max(obj);
        // Fixed-point residual of a plain projected-gradient step.
        let g = grad(&a);
        let plain: Vec<f64> = a.iter().zip(&g).map(|(ai, gi)| ai - gi / lip).collect();
        let residual = project(&plain, y, c)
            .iter()
            .zip(&a)
            .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        if residual < 1e-13 {
            break;
        }
    }

    // Bias from the KKT conditions.
    let f: Vec<f64> = (0..n).map(|t| (0..n).map(|s| a[s] * y[s] * kmat[s][t]).sum()).collect();
    let eps = 1e-7 * c;
    let free: Vec<usize> = (0..n).filter(|&t| a[t] > eps && a[t] < c - eps).collect();
    let bias = if !free.is_empty() {
        free.iter().map(|&t| y[t] - f[t]).sum::<f64>() / free.len() as f64
    } else {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for t in 0..n {
            let v = y[t] - f[t];
            let at_zero = a[t] <= eps;
            if (y[t] > 0.0 && at_zero) || (y[t] < 0.0 && !at_zero) {
                lo = lo.max(v);
            } else {
                hi = hi.min(v);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            _ => 0.0,
        }
    };
    QpSolution {
        objective: objective(&q, &a),
        alphas: a,
        bias,
        iterations,
    }
}

/// Oracle decision value at `z`.
pub fn decision<K: Fn(&[f64], &[f64]) -> f64>(sol: &QpSolution, x: &[Vec<f64>], y: &[f64], kernel: K, z: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(&sol.alphas)
        .map(|((xi, yi), ai)| ai * yi * kernel(xi, z))
        .sum::<f64>()
        + sol.bias
}
