use std::f64::consts::PI;

use super::UnitParams;
use crate::error::{Error, Result};

/// Zero-mean Gaussian through its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    dim: usize,
    /// Lower triangular factor, row-major.
    chol: Vec<f64>,
    log_det: f64,
}

impl Gaussian {
    /// `None` if `sigma` is not symmetric positive definite.
    pub fn new(sigma: &[f64], dim: usize) -> Option<Self> {
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = sigma[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * dim + i] = s.sqrt();
                } else {
                    l[i * dim + j] = s / l[j * dim + j];
                }
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| l[i * dim + i].ln()).sum::<f64>();
        Some(Self { dim, chol: l, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn log_pdf(&self, delta: &[f64]) -> f64 {
        let d = self.dim;
        // Forward substitution: L z = delta, Mahalanobis = |z|^2.
        let mut z = [0.0f64; 16];
        let mut z_heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            z_heap = vec![0.0; d];
            &mut z_heap
        };
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = delta[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * z[k];
            }
            z[i] = s / self.chol[i * d + i];
            maha += z[i] * z[i];
        }
        -0.5 * (d as f64 * (2.0 * PI).ln() + self.log_det + maha)
    }
}

/// `(ln(pi N(delta; 0, Sigma)), ln((1 - pi) gamma))`; either may be `-inf`.
pub fn log_terms(delta: &[f64], unit: &UnitParams, gauss: &Gaussian) -> (f64, f64) {
    let log_in = if unit.pi > 0.0 { unit.pi.ln() + gauss.log_pdf(delta) } else { f64::NEG_INFINITY };
    let log_out = if unit.pi < 1.0 { (1.0 - unit.pi).ln() + unit.gamma.ln() } else { f64::NEG_INFINITY };
    (log_in, log_out)
}

/// The two weighted mixture densities `(pi N(delta; 0, Sigma), (1 - pi) gamma)`.
pub fn gum_density(delta: &[f64], unit: &UnitParams) -> Result<(f64, f64)> {
    unit.validate()?;
    if delta.len() != unit.dim {
        return Err(Error::Shape(format!("residual of length {} for a unit of dim {}", delta.len(), unit.dim)));
    }
    let gauss = Gaussian::new(&unit.sigma, unit.dim).ok_or(Error::DegenerateCovariance { unit: 0 })?;
    let (li, lo) = log_terms(delta, unit, &gauss);
    Ok((li.exp(), lo.exp()))
}
