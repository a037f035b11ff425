//! End-to-end runs: configuration, data splits, training, evaluation,
//! reports and the breakdown sweep.

mod config;
mod report;
mod sweep;

pub use config::{
    CorruptionConfig, EvalConfig, FileTask, ModelConfig, Precision, RunConfig, SgdOverride, SweepConfig,
    SyntheticTask, TaskConfig,
};
pub use report::{
    build_splits, evaluate, run_eval, run_train, save_run, Model, OutlierSummary, RunReport, Splits, Timings,
    TrainRun,
};
pub use sweep::{breakdown_sweep, write_sweep, SweepCell, SweepResult, SweepRow, SweepSummary};
