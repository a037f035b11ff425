//! Gaussian-uniform mixture over regression residuals.
//!
//! Each outlier unit (the whole output vector, a group of coordinates, or a
//! single coordinate) carries its own inlier prior `pi`, zero-mean Gaussian
//! covariance `sigma` and uniform density `gamma`.

mod density;
mod em;

pub use density::{gum_density, log_terms, Gaussian};
pub use em::{
    e_step, em_fit, init_params, log_likelihood, m_step, EmConfig, EmFit, EmIterate, UnitSummary,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Residuals `delta_n = y_n - phi(x_n)`, one row per sample.
pub type Residuals = Matrix<f64>;

/// How the output coordinates are partitioned into outlier units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Granularity {
    /// One unit spanning every output coordinate.
    SampleWise,
    /// One unit per contiguous group of coordinates, e.g. per 2-D landmark.
    GroupWise(Vec<Range<usize>>),
    /// One unit per scalar coordinate.
    CoordinateWise,
}

impl Granularity {
    /// Consecutive coordinate pairs, the landmark convention.
    pub fn pairs(dim: usize) -> Self {
        Granularity::GroupWise((0..dim).step_by(2).map(|s| s..(s + 2).min(dim)).collect())
    }

    /// The units as coordinate ranges for a `dim`-dimensional output.
    pub fn units(&self, dim: usize) -> Result<Vec<Range<usize>>> {
        if dim == 0 {
            return Err(Error::Shape("output dimension must be positive".into()));
        }
        match self {
            Granularity::SampleWise => Ok(vec![0..dim]),
            Granularity::CoordinateWise => Ok((0..dim).map(|d| d..d + 1).collect()),
            Granularity::GroupWise(groups) => {
                let mut next = 0;
                for g in groups {
                    if g.start != next || g.end <= g.start {
                        return Err(Error::config(format!(
                            "groups must be non-empty contiguous ranges covering 0..{dim}; got {groups:?}"
                        )));
                    }
                    next = g.end;
                }
                if next != dim {
                    return Err(Error::config(format!("groups cover 0..{next}, output dim is {dim}")));
                }
                Ok(groups.clone())
            }
        }
    }
}

/// Mixture parameters of a single outlier unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitParams {
    /// First output coordinate of the unit.
    pub start: usize,
    /// Number of coordinates in the unit.
    pub dim: usize,
    /// Inlier prior.
    pub pi: f64,
    /// Row-major `dim x dim` covariance of the inlier Gaussian.
    pub sigma: Vec<f64>,
    /// Density of the uniform outlier component.
    pub gamma: f64,
}

impl UnitParams {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::config(format!("pi must lie in [0, 1], got {}", self.pi)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.sigma.len() != self.dim * self.dim {
            return Err(Error::Shape(format!("sigma has {} entries for a unit of dim {}", self.sigma.len(), self.dim)));
        }
        Ok(())
    }

    pub fn det_sigma(&self) -> f64 {
        Gaussian::new(&self.sigma, self.dim).map_or(0.0, |g| g.log_det().exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub units: Vec<UnitParams>,
}

impl MixtureParams {
    /// Same `pi`, `sigma` (scaled identity) and `gamma` in every unit.
    pub fn uniform_over(units: &[Range<usize>], pi: f64, variance: f64, gamma: f64) -> Self {
        Self {
            units: units
                .iter()
                .map(|r| {
                    let d = r.len();
                    let mut sigma = vec![0.0; d * d];
                    (0..d).for_each(|i| sigma[i * d + i] = variance);
                    UnitParams { start: r.start, dim: d, pi, sigma, gamma }
                })
                .collect(),
        }
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.units.iter().map(UnitParams::range).collect()
    }

    pub fn validate_for(&self, units: &[Range<usize>]) -> Result<()> {
        if self.ranges() != units {
            return Err(Error::Shape(format!("mixture units {:?} do not match {:?}", self.ranges(), units)));
        }
        self.units.iter().try_for_each(UnitParams::validate)
    }

    /// Mean inlier prior over units, for progress reports.
    pub fn mean_pi(&self) -> f64 {
        self.units.iter().map(|u| u.pi).sum::<f64>() / self.units.len().max(1) as f64
    }
}

/// Inlier posteriors, one per (sample, unit), stored sample-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    samples: usize,
    units: usize,
    r: Vec<f64>,
}

impl Responsibilities {
    pub fn new(samples: usize, units: usize, r: Vec<f64>) -> Result<Self> {
        if r.len() != samples * units {
            return Err(Error::Shape(format!("{} responsibilities for {samples} samples x {units} units", r.len())));
        }
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("responsibilities must lie in [0, 1]"));
        }
        Ok(Self { samples, units, r })
    }

    pub fn ones(samples: usize, units: usize) -> Self {
        Self { samples, units, r: vec![1.0; samples * units] }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn get(&self, sample: usize, unit: usize) -> f64 {
        self.r[sample * self.units + unit]
    }

    pub fn sample(&self, sample: usize) -> &[f64] {
        &self.r[sample * self.units..(sample + 1) * self.units]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    /// Expands unit responsibilities to one weight per output coordinate.
    pub fn coordinate_weights(&self, units: &[Range<usize>], dim: usize) -> Result<Matrix<f64>> {
        if units.len() != self.units {
            return Err(Error::Shape(format!("{} units given, responsibilities have {}", units.len(), self.units)));
        }
        let mut w = Matrix::zeros(self.samples, dim);
        for n in 0..self.samples {
            let row = w.row_mut(n);
            for (u, range) in units.iter().enumerate() {
                row[range.clone()].iter_mut().for_each(|v| *v = self.r[n * self.units + u]);
            }
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granularity_units() {
        assert_eq!(Granularity::SampleWise.units(4).unwrap(), vec![0..4]);
        assert_eq!(Granularity::CoordinateWise.units(3).unwrap(), vec![0..1, 1..2, 2..3]);
        assert_eq!(Granularity::pairs(4).units(4).unwrap(), vec![0..2, 2..4]);
        assert!(Granularity::GroupWise(vec![0..2, 3..4]).units(4).is_err());
        assert!(Granularity::GroupWise(vec![0..2]).units(4).is_err());
        assert!(Granularity::GroupWise(vec![0..0, 0..4]).units(4).is_err());
    }

    #[test]
    fn coordinate_weights_follow_units() {
        let r = Responsibilities::new(1, 2, vec![0.25, 0.75]).unwrap();
        let w = r.coordinate_weights(&[0..2, 2..3], 3).unwrap();
        assert_eq!(w.row(0), &[0.25, 0.25, 0.75]);
    }

    #[test]
    fn responsibilities_reject_out_of_range() {
        assert!(Responsibilities::new(1, 1, vec![1.5]).is_err());
        assert!(Responsibilities::new(2, 1, vec![0.5]).is_err());
    }
}
