use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    /// `exp(-gamma * |x - x'|^2)`
    Rbf { gamma: f64 },
    /// `(gamma * x.x' + beta)^degree`
    Polynomial { gamma: f64, beta: f64, degree: u32 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { gamma } => {
                if gamma > 0.0 && gamma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("rbf gamma must be positive, got {gamma}")))
                }
            }
            KernelSpec::Polynomial { gamma, beta, degree } => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    Err(Error::invalid(format!("polynomial gamma must be positive, got {gamma}")))
                } else if !beta.is_finite() {
                    Err(Error::invalid("polynomial beta must be finite"))
                } else if degree == 0 {
                    Err(Error::invalid("polynomial degree must be at least 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        match *self {
            KernelSpec::Linear => a[0] * b[0] + a[1] * b[1],
            KernelSpec::Rbf { gamma } => {
                let d0 = a[0] - b[0];
                let d1 = a[1] - b[1];
                (-gamma * (d0 * d0 + d1 * d1)).exp()
            }
            KernelSpec::Polynomial { gamma, beta, degree } => {
                (gamma * (a[0] * b[0] + a[1] * b[1]) + beta).powi(degree as i32)
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            KernelSpec::Linear => "linear".into(),
            KernelSpec::Rbf { gamma } => format!("rbf(gamma={gamma})"),
            KernelSpec::Polynomial { gamma, beta, degree } => {
                format!("poly{degree}(gamma={gamma},beta={beta})")
            }
        }
    }
}

/// `K[i, j] = k(xa[i], xb[j])`.
pub fn gram(xa: &[[f64; 2]], xb: &[[f64; 2]], kernel: &KernelSpec) -> Result<Array2<f64>> {
    kernel.validate()?;
    Ok(Array2::from_shape_fn((xa.len(), xb.len()), |(i, j)| kernel.eval(&xa[i], &xb[j])))
}

/// Block-diagonal Gram for two independent outputs.
pub fn gram_mo(x: &[[f64; 2]], kernel: &KernelSpec) -> Result<Array2<f64>> {
    let k = gram(x, x, kernel)?;
    Ok(block_diag(&k, &k))
}

pub(crate) fn block_diag(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Array2::zeros((n + m, n + m));
    out.slice_mut(ndarray::s![..n, ..n]).assign(a);
    out.slice_mut(ndarray::s![n.., n..]).assign(b);
    out
}
