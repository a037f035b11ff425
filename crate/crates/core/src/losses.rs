//! Responsibility-weighted squared loss and the M-estimator baselines.
//!
//! Scalar losses follow the half-square convention: L2 is `rho(u) = u^2 / 2`
//! with gradient `psi(u) = u`, so Huber and L2 coincide on `|u| <= c` and the
//! Huber gradient saturates at exactly `c`. The network objective multiplies
//! by two so that all four losses reduce to `delta^2` near zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mixture::{Granularity, Residuals, Responsibilities};
use crate::scalar::Scalar;

/// Tukey's biweight constant, also used as the Huber threshold.
pub const DEFAULT_TUNING_C: f64 = 4.6851;
/// Lower bound on every MAD entry.
pub const MAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L2,
    Huber,
    Biweight,
    #[serde(rename = "deepgum")]
    DeepGum,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::Huber => "huber",
            LossKind::Biweight => "biweight",
            LossKind::DeepGum => "deepgum",
        }
    }

    pub fn is_m_estimator(self) -> bool {
        matches!(self, LossKind::Huber | LossKind::Biweight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Mad,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    #[serde(rename = "loss")]
    pub kind: LossKind,
    pub tuning_c: f64,
    pub normalization: Normalization,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { kind: LossKind::DeepGum, tuning_c: DEFAULT_TUNING_C, normalization: Normalization::Mad }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tuning_c > 0.0 && self.tuning_c.is_finite()) {
            return Err(Error::config(format!("tuning_c must be positive, got {}", self.tuning_c)));
        }
        Ok(())
    }
}

/// Per-coordinate median absolute deviation of residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadScale(pub Vec<f64>);

impl MadScale {
    pub fn ones(dim: usize) -> Self {
        MadScale(vec![1.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over samples of `|delta - median(delta)|`, per coordinate,
/// floored at [`MAD_FLOOR`].
pub fn mad(residuals: &Residuals) -> Result<MadScale> {
    if residuals.rows() == 0 {
        return Err(Error::Shape("MAD of zero residuals".into()));
    }
    Ok(MadScale(
        (0..residuals.cols())
            .map(|j| {
                let mut col = residuals.column(j);
                let med = median(&mut col);
                let mut dev: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
                median(&mut dev).max(MAD_FLOOR)
            })
            .collect(),
    ))
}

/// `(rho(u), psi(u))` for a normalized scalar residual `u`.
///
/// DeepGUM has the L2 shape here; its robustness comes from the
/// responsibility weights applied by the caller.
pub fn loss_and_weight<T: Scalar>(u: T, spec: &LossSpec) -> (T, T) {
    let half = T::lit(0.5);
    let c = T::lit(spec.tuning_c);
    match spec.kind {
        LossKind::L2 | LossKind::DeepGum => (half * u * u, u),
        LossKind::Huber => {
            if u.abs() <= c {
                (half * u * u, u)
            } else {
                (c * u.abs() - half * c * c, c * u.signum())
            }
        }
        LossKind::Biweight => {
            let c2_6 = c * c / T::lit(6.0);
            if u.abs() <= c {
                let t = T::one() - (u / c) * (u / c);
                (c2_6 * (T::one() - t * t * t), u * t * t)
            } else {
                (c2_6, T::zero())
            }
        }
    }
}

/// Network loss of one coordinate, `2 s^2 rho(delta / s)`, and its
/// derivative with respect to `delta`, `2 s psi(delta / s)`.
pub fn coordinate_loss<T: Scalar>(delta: T, scale: T, spec: &LossSpec) -> (T, T) {
    let two = T::lit(2.0);
    let (rho, psi) = loss_and_weight(delta / scale, spec);
    (two * scale * scale * rho, two * scale * psi)
}

/// True when an M-estimator treats the coordinate as an outlier, i.e. the
/// normalized residual lies beyond `c`.
pub fn beyond_threshold(delta: f64, scale: f64, spec: &LossSpec) -> bool {
    (delta / scale).abs() > spec.tuning_c
}

/// `sum_n sum_units r_nu ||delta_n[unit]||^2`.
pub fn deepgum_batch_loss(residuals: &Residuals, resp: &Responsibilities, gran: &Granularity) -> Result<f64> {
    let units = gran.units(residuals.cols())?;
    if resp.samples() != residuals.rows() || resp.units() != units.len() {
        return Err(Error::Shape(format!(
            "responsibilities {}x{} do not align with {} residuals over {} units",
            resp.samples(),
            resp.units(),
            residuals.rows(),
            units.len()
        )));
    }
    Ok(residuals
        .iter_rows()
        .enumerate()
        .map(|(n, row)| {
            units
                .iter()
                .enumerate()
                .map(|(u, range)| resp.get(n, u) * row[range.clone()].iter().map(|d| d * d).sum::<f64>())
                .sum::<f64>()
        })
        .sum())
}

/// Per-coordinate squared-loss weights as a residual-shaped matrix.
pub fn coordinate_weights(resp: &Responsibilities, gran: &Granularity, dim: usize) -> Result<Matrix<f64>> {
    resp.coordinate_weights(&gran.units(dim)?, dim)
}
