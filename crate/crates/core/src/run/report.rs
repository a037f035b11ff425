use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig, TaskConfig, VAL_SEED_SALT};
use super::EvalConfig;
use crate::data::{corrupt, load_dataset, make_teacher_dataset, rng_stream, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::matrix::Matrix;
use crate::mixture::MixtureParams;
use crate::net::{self, Regressor};
use crate::scalar::Scalar;
use crate::stats::{metrics, precision_recall, sample_errors, MetricReport};
use crate::trainer::{self, EmTrace, EpochRecord, StopReason, TrainOutcome};

const INIT_STREAM: u64 = 10;

/// Wall-clock durations. Always compares equal, so reports from repeated
/// runs can be checked for equality.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Timings {
    pub data_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl PartialEq for Timings {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub units: usize,
    pub detected: usize,
    pub detected_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: RunConfig,
    pub loss: LossKind,
    pub stop: StopReason,
    pub outer_iterations: usize,
    pub epochs: Vec<EpochRecord>,
    pub em_traces: Vec<EmTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<MixtureParams>,
    pub train: MetricReport,
    pub val: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<OutlierSummary>,
    /// Mean absolute error of every test sample, for paired tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_errors: Option<Vec<f64>>,
    pub timings: Timings,
}

/// A trained network in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    F64(Regressor<f64>),
    F32(Regressor<f32>),
}

fn predict_with<T: Scalar>(net: &Regressor<T>, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    if x.cols() != net.input_dim() {
        return Err(Error::InputShape { expected: net.input_dim(), got: x.cols() });
    }
    let rows: Vec<Result<Vec<f64>>> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let xi: Vec<T> = x.row(i).iter().map(|&v| T::lit(v)).collect();
            Ok(net.forward(&xi)?.into_iter().map(|v| v.to_f64_lossless()).collect())
        })
        .collect();
    let mut data = Vec::with_capacity(x.rows() * net.output_dim());
    for r in rows {
        data.extend(r?);
    }
    Matrix::from_vec(x.rows(), net.output_dim(), data)
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::F64(n) => n.input_dim(),
            Model::F32(n) => n.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::F64(n) => n.output_dim(),
            Model::F32(n) => n.output_dim(),
        }
    }

    pub fn predict(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        match self {
            Model::F64(n) => predict_with(n, x),
            Model::F32(n) => predict_with(n, x),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Model::F64(n) => net::save_to_path(n, path),
            Model::F32(n) => net::save_to_path(n, path),
        }
    }

    /// Loads a model file in whichever precision it was saved.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match net::peek_header(path)?.scalar.as_str() {
            "f32" => Ok(Model::F32(net::load_from_path(path)?)),
            "f64" => Ok(Model::F64(net::load_from_path(path)?)),
            other => Err(Error::Format(format!("unknown scalar type {other:?} in {}", path.display()))),
        }
    }
}

/// Train, validation and optional test data of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    /// Corruption applied to the training and validation splits.
    pub corruption: Option<(CorruptionSpec, CorruptionSpec)>,
}

pub fn build_splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, val, test) = match &cfg.task {
        TaskConfig::Synthetic(t) => {
            let all = make_teacher_dataset(t.n_train + t.n_val + t.n_test, &t.teacher(), cfg.seed)?;
            let (tr, va, te) = all.split(t.n_train, t.n_val)?;
            (tr, va, (t.n_test > 0).then_some(te))
        }
        TaskConfig::Files(f) => {
            let (tr, _) = load_dataset(&f.train)?;
            let (va, _) = load_dataset(&f.val)?;
            let te = f.test.as_ref().map(load_dataset).transpose()?.map(|(d, _)| d);
            (tr, va, te)
        }
    };
    for other in [Some(&val), test.as_ref()].into_iter().flatten() {
        if other.input_dim() != train.input_dim() || other.output_dim() != train.output_dim() {
            return Err(Error::Format("dataset splits differ in dimensions".into()));
        }
    }
    match &cfg.corruption {
        Some(c) => {
            let (st, sv) = (c.spec(cfg.seed), c.spec(cfg.seed ^ VAL_SEED_SALT));
            Ok(Splits { train: corrupt(&train, &st)?, val: corrupt(&val, &sv)?, test, corruption: Some((st, sv)) })
        }
        None => Ok(Splits { train, val, test, corruption: None }),
    }
}

/// Metrics of `model` on `data`, with outlier scores left empty.
pub fn evaluate(model: &Model, data: &Dataset, eval: &EvalConfig) -> Result<MetricReport> {
    let pred = model.predict(&data.inputs)?;
    let scale = eval.scale.or(data.bounds.map(|b| b.width)).unwrap_or(1.0);
    metrics(&pred, &data.targets, &data.groups, eval.failure_threshold, &vec![scale; data.len()])
}

/// Evaluates a saved model on a dataset whose dimensions must match it.
pub fn run_eval(model: &Model, data: &Dataset, eval: &EvalConfig) -> Result<MetricReport> {
    if model.input_dim() != data.input_dim() || model.output_dim() != data.output_dim() {
        return Err(Error::Format(format!(
            "model maps {} -> {}, dataset has {} inputs and {} targets",
            model.input_dim(),
            model.output_dim(),
            data.input_dim(),
            data.output_dim()
        )));
    }
    evaluate(model, data, eval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub report: RunReport,
    pub model: Model,
}

fn fit<T: Scalar>(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome<T>> {
    let net = Regressor::<T>::random(
        splits.train.input_dim(),
        &cfg.model.hidden,
        splits.train.output_dim(),
        cfg.model.activation,
        &mut rng_stream(cfg.seed, INIT_STREAM),
    )?;
    trainer::train(net, &splits.train, &splits.val, &cfg.train)
}

/// Builds the splits, trains, and evaluates on every split.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let t0 = Instant::now();
    let splits = build_splits(&cfg)?;
    let data_seconds = t0.elapsed().as_secs_f64();
    run_train_on(&cfg, &splits, data_seconds)
}

pub(crate) fn run_train_on(cfg: &RunConfig, splits: &Splits, data_seconds: f64) -> Result<TrainRun> {
    let t1 = Instant::now();
    match cfg.model.precision {
        Precision::F64 => {
            let outcome = fit::<f64>(cfg, splits)?;
            let model = Model::F64(outcome.net.clone());
            assemble(cfg, splits, model, outcome, data_seconds, t1)
        }
        Precision::F32 => {
            let outcome = fit::<f32>(cfg, splits)?;
            let model = Model::F32(outcome.net.clone());
            assemble(cfg, splits, model, outcome, data_seconds, t1)
        }
    }
}

fn assemble<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    model: Model,
    outcome: TrainOutcome<T>,
    data_seconds: f64,
    t1: Instant,
) -> Result<TrainRun> {
    let train_seconds = t1.elapsed().as_secs_f64();
    info!("{} training finished in {train_seconds:.2}s ({:?})", outcome.loss.name(), outcome.stop);

    let t2 = Instant::now();
    let mut train = evaluate(&model, &splits.train, &cfg.eval)?;
    let val = evaluate(&model, &splits.val, &cfg.eval)?;
    let (test, test_errors) = match &splits.test {
        Some(te) => {
            let pred = model.predict(&te.inputs)?;
            (Some(evaluate(&model, te, &cfg.eval)?), Some(sample_errors(&pred, &te.targets)?))
        }
        None => (None, None),
    };
    let outliers = match &outcome.train_outliers {
        Some(flags) => {
            let detected = flags.iter().filter(|&&f| f).count();
            let pr = match splits.train.labels_for(&outcome.units) {
                Some(truth) => Some(precision_recall(flags, &truth)?),
                None => None,
            };
            if let Some((p, r)) = pr {
                train = train.with_detection(p, r);
            }
            Some(OutlierSummary {
                units: outcome.units.len(),
                detected,
                detected_fraction: detected as f64 / flags.len().max(1) as f64,
                precision: pr.map(|x| x.0),
                recall: pr.map(|x| x.1),
            })
        }
        None => None,
    };
    let eval_seconds = t2.elapsed().as_secs_f64();

    let report = RunReport {
        version: crate::VERSION.to_string(),
        config: cfg.clone(),
        loss: outcome.loss,
        stop: outcome.stop,
        outer_iterations: outcome.outer_iterations,
        epochs: outcome.records,
        em_traces: outcome.em_traces,
        final_params: outcome.params,
        train,
        val,
        test,
        outliers,
        test_errors,
        timings: Timings { data_seconds, train_seconds, eval_seconds },
    };
    Ok(TrainRun { report, model })
}

/// Writes `model.bin`, `report.json` and `em_trace.jsonl` into `dir`.
pub fn save_run(dir: impl AsRef<Path>, run: &TrainRun) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    run.model.save(dir.join("model.bin"))?;
    let mut report = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut report, &run.report)?;
    report.write_all(b"\n")?;
    report.flush()?;
    let mut trace = BufWriter::new(File::create(dir.join("em_trace.jsonl"))?);
    for t in &run.report.em_traces {
        for it in &t.iterates {
            serde_json::to_writer(&mut trace, &serde_json::json!({ "outer": t.outer, "iterate": it }))?;
            trace.write_all(b"\n")?;
        }
    }
    trace.flush()?;
    Ok(())
}
