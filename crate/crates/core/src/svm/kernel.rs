use super::SvmError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<(), SvmError> {
        match self {
            Kernel::Rbf { gamma } if !(*gamma > 0.0 && gamma.is_finite()) => {
                Err(SvmError::Config(format!("RBF gamma must be positive, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    /// Kernel value without a dimension check.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::Rbf { .. } => "rbf",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            Kernel::Linear => None,
            Kernel::Rbf { gamma } => Some(*gamma),
        }
    }
}

pub fn kernel_eval(k: &Kernel, x: &[f64], y: &[f64]) -> Result<f64, SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(k.eval_unchecked(x, y))
}

/// The "scale" heuristic: `1 / (d * var(X))` over all entries, or 1 when the
/// data has no variance.
pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(0, Vec::len);
    let n = (x.len() * d) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}
