use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{CorruptionConfig, RunConfig, SweepConfig};
use super::report::{build_splits, run_train_on, RunReport, Splits};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::stats::{wilcoxon_signed_rank, WilcoxonResult};

/// One trained (fraction, loss, seed) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub fraction: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// The run report, or the error that ended the cell.
    pub outcome: std::result::Result<RunReport, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub scheme: String,
    pub loss: String,
    pub seed: u64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub failure_rate: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub p_value_vs_l2: Option<f64>,
    pub stars: Option<u8>,
    pub error: Option<String>,
}

/// Seed aggregate of one (fraction, loss) pair; the test compares pooled
/// per-sample test errors against L2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub fraction: f64,
    pub scheme: String,
    pub loss: String,
    pub seeds_ok: usize,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub failure_rate_mean: Option<f64>,
    pub failure_rate_std: Option<f64>,
    pub precision_mean: Option<f64>,
    pub recall_mean: Option<f64>,
    pub pooled_p_value_vs_l2: Option<f64>,
    pub stars: Option<u8>,
    pub better_than_l2: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn cell(&self, fraction: f64, loss: LossKind, seed: u64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.fraction == fraction && c.loss == loss && c.seed == seed)
    }

    pub fn summary_for(&self, fraction: f64, loss: LossKind) -> Option<&SweepSummary> {
        self.summary.iter().find(|s| s.fraction == fraction && s.loss == loss.name())
    }
}

fn cell_config(base: &RunConfig, sweep: &SweepConfig, fraction: f64, loss: LossKind, seed: u64) -> RunConfig {
    let mut cfg = base.clone().with_seed(seed);
    let template = base.corruption.clone().unwrap_or_default();
    cfg.corruption = Some(CorruptionConfig { scheme: sweep.scheme, fraction, ..template });
    cfg.sweep = None;
    cfg.train.loss = loss;
    if let Some(o) = sweep.overrides.get(loss.name()) {
        if let Some(lr) = o.learning_rate {
            cfg.train.sgd.learning_rate = lr;
        }
        if let Some(b) = o.batch_size {
            cfg.train.sgd.batch_size = b;
        }
        if let Some(e) = o.max_epochs {
            cfg.train.sgd.max_epochs = e;
        }
    }
    cfg
}

fn test_errors(cell: &SweepCell) -> Option<&[f64]> {
    cell.outcome.as_ref().ok()?.test_errors.as_deref()
}

fn compare(a: &[f64], b: &[f64]) -> Option<WilcoxonResult> {
    (a.len() == b.len() && !a.is_empty()).then(|| wilcoxon_signed_rank(a, b).ok()).flatten()
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (Some(mean), Some(var.sqrt()))
}

/// Trains every (fraction, loss, seed) cell of `base.sweep` and evaluates it
/// on the clean test split. Failing cells are recorded and skipped.
pub fn breakdown_sweep(base: &RunConfig) -> Result<SweepResult> {
    let sweep = base.sweep.clone().ok_or_else(|| Error::config("config has no [sweep] block"))?;
    let base = base.clone().resolved();
    base.validate()?;
    let scheme = sweep.scheme.name().to_string();

    let keys: Vec<(f64, u64)> =
        sweep.fractions.iter().flat_map(|&f| sweep.seeds.iter().map(move |&s| (f, s))).collect();
    let splits: Vec<std::result::Result<Splits, String>> = keys
        .par_iter()
        .map(|&(f, s)| {
            let cfg = cell_config(&base, &sweep, f, LossKind::L2, s);
            let splits = build_splits(&cfg).map_err(|e| e.to_string())?;
            if splits.test.is_none() {
                return Err("sweep cells need a test split".to_string());
            }
            Ok(splits)
        })
        .collect();

    let jobs: Vec<(usize, LossKind)> =
        (0..keys.len()).flat_map(|k| sweep.losses.iter().map(move |&l| (k, l))).collect();
    let mut cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(k, loss)| {
            let (fraction, seed) = keys[k];
            let cfg = cell_config(&base, &sweep, fraction, loss, seed);
            let outcome = match &splits[k] {
                Err(e) => Err(e.clone()),
                Ok(sp) => cfg.validate().and_then(|_| run_train_on(&cfg, sp, 0.0)).map(|r| r.report).map_err(|e| e.to_string()),
            };
            match &outcome {
                Ok(r) => info!("cell fraction {fraction} {} seed {seed}: test MAE {:?}", loss.name(), r.test.as_ref().map(|t| t.mae)),
                Err(e) => warn!("cell fraction {fraction} {} seed {seed} failed: {e}", loss.name()),
            }
            SweepCell { fraction, loss, seed, outcome }
        })
        .collect();
    // Fraction-major, then loss in the configured order, then seed.
    cells.sort_by(|a, b| {
        let li = |l: LossKind| sweep.losses.iter().position(|&x| x == l).unwrap_or(usize::MAX);
        a.fraction.total_cmp(&b.fraction).then(li(a.loss).cmp(&li(b.loss))).then(a.seed.cmp(&b.seed))
    });

    let l2 = |f: f64, s: u64| cells.iter().find(|c| c.fraction == f && c.seed == s && c.loss == LossKind::L2);
    let rows = cells
        .iter()
        .map(|c| {
            let vs = if c.loss == LossKind::L2 {
                None
            } else {
                l2(c.fraction, c.seed).and_then(test_errors).zip(test_errors(c)).and_then(|(b, a)| compare(a, b))
            };
            let (report, error) = match &c.outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.clone())),
            };
            let test = report.and_then(|r| r.test.as_ref());
            let det = report.and_then(|r| r.outliers.as_ref());
            SweepRow {
                fraction: c.fraction,
                scheme: scheme.clone(),
                loss: c.loss.name().to_string(),
                seed: c.seed,
                mae: test.map(|t| t.mae),
                rmse: test.map(|t| t.rmse),
                failure_rate: test.map(|t| t.failure_rate),
                precision: det.and_then(|d| d.precision),
                recall: det.and_then(|d| d.recall),
                p_value_vs_l2: vs.as_ref().map(|w| w.p_value),
                stars: vs.as_ref().map(|w| w.stars),
                error,
            }
        })
        .collect();

    let mut summary = Vec::new();
    for &f in &sweep.fractions {
        for &loss in &sweep.losses {
            let group: Vec<&SweepCell> = cells.iter().filter(|c| c.fraction == f && c.loss == loss).collect();
            let ok: Vec<&RunReport> = group.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
            let col = |g: &dyn Fn(&RunReport) -> Option<f64>| ok.iter().filter_map(|r| g(r)).collect::<Vec<f64>>();
            let (mae_mean, mae_std) = mean_std(&col(&|r| r.test.as_ref().map(|t| t.mae)));
            let (failure_rate_mean, failure_rate_std) = mean_std(&col(&|r| r.test.as_ref().map(|t| t.failure_rate)));
            let precision_mean = mean_std(&col(&|r| r.outliers.as_ref().and_then(|o| o.precision))).0;
            let recall_mean = mean_std(&col(&|r| r.outliers.as_ref().and_then(|o| o.recall))).0;
            let pooled = if loss == LossKind::L2 {
                None
            } else {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for c in &group {
                    if let (Some(ea), Some(eb)) = (test_errors(c), l2(f, c.seed).and_then(test_errors)) {
                        if ea.len() == eb.len() {
                            a.extend_from_slice(ea);
                            b.extend_from_slice(eb);
                        }
                    }
                }
                compare(&a, &b)
            };
            summary.push(SweepSummary {
                fraction: f,
                scheme: scheme.clone(),
                loss: loss.name().to_string(),
                seeds_ok: ok.len(),
                mae_mean,
                mae_std,
                failure_rate_mean,
                failure_rate_std,
                precision_mean,
                recall_mean,
                pooled_p_value_vs_l2: pooled.as_ref().map(|w| w.p_value),
                stars: pooled.as_ref().map(|w| w.stars),
                better_than_l2: pooled.as_ref().map(|w| w.favors_first()),
            });
        }
    }
    Ok(SweepResult { config: sweep, cells, rows, summary })
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `sweep.csv`, `summary.csv` and one report per successful cell
/// under `reports/`.
pub fn write_sweep(dir: impl AsRef<Path>, result: &SweepResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("reports"))?;
    write_csv(&dir.join("sweep.csv"), &result.rows)?;
    write_csv(&dir.join("summary.csv"), &result.summary)?;
    for c in &result.cells {
        if let Ok(r) = &c.outcome {
            let name = format!("{}_{}_{}_seed{}.json", result.config.scheme.name(), c.fraction, c.loss.name(), c.seed);
            let mut f = BufWriter::new(File::create(dir.join("reports").join(name))?);
            serde_json::to_writer_pretty(&mut f, r)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
    }
    Ok(())
}
