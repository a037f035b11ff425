//! Robust regression with a Gaussian-uniform mixture (GUM) over residuals.
//!
//! The crate alternates two estimators: an EM fit of a mixture with a
//! Gaussian inlier component and a uniform outlier component, and
//! responsibility-weighted SGD on a small feedforward regressor. Baseline
//! M-estimator losses (Huber, Tukey's biweight), synthetic corruption
//! protocols and a Wilcoxon-based evaluation harness sit alongside.
//!
//! The network, the losses and the training loop are generic over the
//! [`Scalar`] type (`f32` or `f64`). The mixture and every statistic run in
//! `f64`: mixture densities underflow in single precision at modest residuals.

pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod mixture;
pub mod net;
pub mod run;
pub mod scalar;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub use data::{CorruptionScheme, CorruptionSpec, Dataset};
pub use losses::{LossKind, LossSpec, MadScale};
pub use mixture::{EmConfig, EmFit, Granularity, MixtureParams, Responsibilities, UnitParams};
pub use net::{Activation, GradientTape, Layer, Regressor, SgdConfig};
pub use stats::{MetricReport, WilcoxonResult};
pub use trainer::{TrainConfig, TrainOutcome, TrainState};
pub use run::{RunConfig, RunReport};

/// Double-precision regressor, the default for every command.
pub type Regressor64 = Regressor<f64>;
/// Single-precision regressor.
pub type Regressor32 = Regressor<f32>;
pub type GradientTape64 = GradientTape<f64>;
pub type GradientTape32 = GradientTape<f32>;
pub type TrainState64 = TrainState<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainOutcome64 = TrainOutcome<f64>;
pub type TrainOutcome32 = TrainOutcome<f32>;

/// Toolkit version recorded in every run report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
