//! `robust-gum`: generate corrupted datasets, train and evaluate robust
//! regressors, run breakdown sweeps and fit residual mixtures.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use robust_gum::data::{load_dataset, save_dataset};
use robust_gum::mixture::{em_fit, init_params};
use robust_gum::run::{self, Model, RunConfig, TaskConfig};
use robust_gum::trainer::GranularityMode;
use robust_gum::{Error, Matrix};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "robust-gum", version, about = "Robust regression with a Gaussian-uniform residual mixture")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits of a synthetic task as dataset files.
    Generate(RunArgs),
    /// Train a model and write model.bin, report.json and em_trace.jsonl.
    Train(RunArgs),
    /// Evaluate a saved model on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Configuration whose [eval] block is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.json; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (fraction, loss, seed) cell of the [sweep] block.
    Sweep(RunArgs),
    /// Fit the residual mixture to a file of residual rows (JSON arrays, one per line).
    EmFit {
        #[arg(long)]
        residuals: PathBuf,
        /// Configuration whose [train.em] block and granularity are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// sample, group (coordinate pairs) or coordinate.
        #[arg(long)]
        granularity: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a configuration file holding every default value.
    Defaults,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Core(_) => EXIT_CONFIG,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_NUMERIC => "numeric",
            EXIT_IO => "io",
            _ => "config",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(args: &RunArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Leaves a machine-readable record of a failed command in its output directory.
fn write_failure(dir: &Path, command: &str, err: &CliError) {
    let record = serde_json::json!({ "command": command, "kind": err.kind(), "message": err.message() });
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = write_json(&dir.join("error.json"), &record);
    }
}

fn generate(args: &RunArgs) -> CliResult<()> {
    let (cfg, out) = load_config(args)?;
    if !matches!(cfg.task, TaskConfig::Synthetic(_)) {
        return Err(CliError::Usage("generate needs a [task.synthetic] block".into()));
    }
    let splits = run::build_splits(&cfg)?;
    std::fs::create_dir_all(&out)?;
    let (st, sv) = match &splits.corruption {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    save_dataset(&splits.train, out.join("train.jsonl"), Some(cfg.seed), st)?;
    save_dataset(&splits.val, out.join("val.jsonl"), Some(cfg.seed), sv)?;
    if let Some(te) = &splits.test {
        save_dataset(te, out.join("test.jsonl"), Some(cfg.seed), None)?;
    }
    info!("wrote splits of {} / {} samples to {}", splits.train.len(), splits.val.len(), out.display());
    Ok(())
}

fn train(args: &RunArgs) -> CliResult<()> {
    let (cfg, out) = load_config(args)?;
    let result = run::run_train(&cfg).map_err(CliError::from);
    match result {
        Ok(r) => {
            run::save_run(&out, &r)?;
            if let Some(t) = &r.report.test {
                info!("test MAE {:.4}, RMSE {:.4}, failure rate {:.4}", t.mae, t.rmse, t.failure_rate);
            }
            Ok(())
        }
        Err(e) => {
            write_failure(&out, "train", &e);
            Err(e)
        }
    }
}

fn eval(model: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let eval_cfg = match config {
        Some(p) => RunConfig::load(p)?.eval,
        None => Default::default(),
    };
    let model = Model::load(model)?;
    let (ds, _) = load_dataset(data)?;
    let report = run::run_eval(&model, &ds, &eval_cfg)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_json(&dir.join("metrics.json"), &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn sweep(args: &RunArgs) -> CliResult<()> {
    let (cfg, out) = load_config(args)?;
    match run::breakdown_sweep(&cfg) {
        Ok(result) => {
            run::write_sweep(&out, &result)?;
            let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
            info!("sweep finished: {} cells, {failed} failed", result.rows.len());
            Ok(())
        }
        Err(e) => {
            let e = CliError::from(e);
            write_failure(&out, "sweep", &e);
            Err(e)
        }
    }
}

fn read_residuals(path: &Path) -> CliResult<Matrix<f64>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(Matrix::from_rows(rows).map_err(|e| Error::Format(e.to_string()))?)
}

fn em_fit_cmd(residuals: &Path, config: Option<&Path>, granularity: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let train_cfg = match config {
        Some(p) => RunConfig::load(p)?.train,
        None => Default::default(),
    };
    let mode = match granularity {
        None => train_cfg.granularity,
        Some("sample") => GranularityMode::Sample,
        Some("group") => GranularityMode::Group,
        Some("coordinate") => GranularityMode::Coordinate,
        Some(other) => return Err(CliError::Usage(format!("unknown granularity {other:?}"))),
    };
    let res = read_residuals(residuals)?;
    let gran = mode.resolve(&[], res.cols());
    let init = init_params(&res, &gran, &train_cfg.em)?;
    let fit = em_fit(&res, &init, &gran, &train_cfg.em)?;
    let summary = serde_json::json!({
        "converged": fit.converged,
        "params": fit.params,
        "log_likelihoods": fit.log_likelihoods(),
        "trace": fit.trace,
    });
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_json(&dir.join("em_fit.json"), &summary)?;
            let mut f = BufWriter::new(File::create(dir.join("responsibilities.jsonl"))?);
            for n in 0..fit.responsibilities.samples() {
                serde_json::to_writer(&mut f, fit.responsibilities.sample(n))?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval { model, data, config, out } => eval(model, data, config.as_deref(), out.as_deref()),
        Command::Sweep(a) => sweep(a),
        Command::EmFit { residuals, config, granularity, out } => {
            em_fit_cmd(residuals, config.as_deref(), granularity.as_deref(), out.as_deref())
        }
        Command::Defaults => {
            let mut cfg = RunConfig::synthetic(0);
            cfg.corruption = Some(Default::default());
            cfg.sweep = Some(Default::default());
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROBUST_GUM_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
