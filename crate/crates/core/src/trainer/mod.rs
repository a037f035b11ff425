//! Alternating EM and responsibility-weighted SGD, plus the L2 and
//! M-estimator baselines sharing the same early-stopping machinery.

mod fit;

pub use fit::{train, EmOverride, Trainer};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, Normalization, DEFAULT_TUNING_C};
use crate::mixture::{EmConfig, EmIterate, Granularity, MixtureParams, Responsibilities};
use crate::net::{Regressor, SgdConfig};

/// Outlier units as named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityMode {
    Sample,
    /// The dataset's landmark groups, or coordinate pairs when it has none.
    #[default]
    Group,
    Coordinate,
}

impl GranularityMode {
    pub fn resolve(self, groups: &[Range<usize>], dim: usize) -> Granularity {
        match self {
            GranularityMode::Sample => Granularity::SampleWise,
            GranularityMode::Coordinate => Granularity::CoordinateWise,
            GranularityMode::Group if groups.is_empty() => Granularity::pairs(dim),
            GranularityMode::Group => Granularity::GroupWise(groups.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub tuning_c: f64,
    pub normalization: Normalization,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Plain L2 epochs run before any early-stopping bookkeeping.
    pub warmup_epochs: usize,
    /// Relative change of the validation loss that ends the outer loop.
    pub outer_epsilon: f64,
    pub max_outer_iters: usize,
    /// Units with inlier posterior below this are reported as outliers.
    pub outlier_threshold: f64,
    pub granularity: GranularityMode,
    pub sgd: SgdConfig,
    pub em: EmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::DeepGum,
            tuning_c: DEFAULT_TUNING_C,
            normalization: Normalization::Mad,
            patience: 5,
            warmup_epochs: 3,
            outer_epsilon: 1e-5,
            max_outer_iters: 20,
            outlier_threshold: 0.5,
            granularity: GranularityMode::Group,
            sgd: SgdConfig::default(),
            em: EmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_spec(&self) -> LossSpec {
        LossSpec { kind: self.loss, tuning_c: self.tuning_c, normalization: self.normalization }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_spec().validate()?;
        self.sgd.validate()?;
        self.em.validate()?;
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.outer_epsilon > 0.0 && self.outer_epsilon.is_finite()) {
            return Err(Error::config("outer_epsilon must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::config("max_outer_iters must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.outlier_threshold) {
            return Err(Error::config("outlier_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    L2Warmup,
    L2,
    Em,
    Sgd,
    Robust,
}

/// One progress line: an SGD epoch, or an EM refit for the `Em` phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub outer: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub outer: usize,
    pub converged: bool,
    pub iterates: Vec<EmIterate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Single-phase baselines stop on patience or the epoch cap.
    EarlyStopping,
    /// The validation loss grew; the previous iterate was returned.
    Growth,
    /// The validation loss stopped decreasing.
    Converged,
    /// EM classified every unit as an outlier.
    AllOutliers,
    MaxOuterIterations,
}

/// Training progress handed from the L2 stage to the robust stage.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Network acting on standardized inputs and targets.
    pub net: Regressor<T>,
    pub params: Option<MixtureParams>,
    pub train_responsibilities: Option<Responsibilities>,
    pub val_responsibilities: Option<Responsibilities>,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub outer: usize,
    pub records: Vec<EpochRecord>,
    pub em_traces: Vec<EmTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Network acting on raw inputs and producing raw targets.
    pub net: Regressor<T>,
    pub loss: LossKind,
    pub params: Option<MixtureParams>,
    pub units: Vec<Range<usize>>,
    pub train_responsibilities: Option<Responsibilities>,
    /// Detected outliers per (training sample, unit); absent for L2.
    pub train_outliers: Option<Vec<bool>>,
    pub records: Vec<EpochRecord>,
    pub em_traces: Vec<EmTrace>,
    pub outer_iterations: usize,
    pub stop: StopReason,
}

/// Outlier iff the inlier posterior is below `threshold`.
pub fn classify_outliers(resp: &Responsibilities, threshold: f64) -> Vec<bool> {
    resp.as_slice().iter().map(|&r| r < threshold).collect()
}

/// Patience-based early stopping over a validation criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records a validation value; true when it improves on the best so far.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}
