use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use robust_gum::data::{load_dataset, save_dataset, Dataset};
use robust_gum::run::{build_splits, RunConfig};
use robust_gum::{Matrix, RunReport};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_robust-gum"));
    c.env("ROBUST_GUM_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn robust-gum")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
seed = 3
[task.synthetic]
n_train = 400
n_val = 150
n_test = 150
[corruption]
scheme = "lugo"
fraction = 0.3
[model]
hidden = [12]
[train.sgd]
max_epochs = 30
"#;

fn report(dir: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn generate_round_trips_and_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["train.jsonl", "train.jsonl.header.json", "val.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let splits = build_splits(&RunConfig::load(&cfg).unwrap()).unwrap();
    assert_eq!(load_dataset(a.join("train.jsonl")).unwrap().0, splits.train);
    assert_eq!(load_dataset(a.join("test.jsonl")).unwrap().0, splits.test.unwrap());
}

#[test]
fn generate_records_gugo_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "seed = 9\n[task.synthetic]\nn_train = 10000\nn_val = 100\nn_test = 0\n[corruption]\nscheme = \"gugo\"\nfraction = 0.3\n";
    let cfg = write_config(tmp.path(), "c.toml", body);
    ok(&["generate", "--config", s(&cfg), "--out", s(tmp.path())]);
    let (train, header) = load_dataset(tmp.path().join("train.jsonl")).unwrap();
    let spec = header.corruption.unwrap();
    assert_eq!((spec.scheme.name(), spec.fraction, spec.ngo_mean, spec.ngo_std), ("gugo", 0.3, 25.0, 2.0));
    let frac = train.outlier_fraction().unwrap();
    assert!((frac - 0.3).abs() <= 0.01, "labelled fraction {frac}");
}

#[test]
fn l2_and_deepgum_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let l2 = write_config(tmp.path(), "l2.toml", &format!("{SMALL}[train]\nloss = \"l2\"\n"));
    ok(&["train", "--config", s(&l2), "--out", s(&tmp.path().join("l2"))]);
    let r = report(&tmp.path().join("l2"));
    assert!(r.em_traces.is_empty());
    assert_eq!(std::fs::read_to_string(tmp.path().join("l2/em_trace.jsonl")).unwrap(), "");

    let dg = write_config(tmp.path(), "dg.toml", SMALL);
    ok(&["train", "--config", s(&dg), "--out", s(&tmp.path().join("dg"))]);
    let r = report(&tmp.path().join("dg"));
    assert!(!r.em_traces.is_empty());
    for t in &r.em_traces {
        for w in t.iterates.windows(2) {
            assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-9);
        }
    }

    // rerun from the embedded configuration
    let embedded = write_config(tmp.path(), "embedded.toml", &r.config.to_toml_string().unwrap());
    ok(&["train", "--config", s(&embedded), "--out", s(&tmp.path().join("again"))]);
    let again = report(&tmp.path().join("again"));
    assert_eq!((again.train, again.val, again.test), (r.train, r.val, r.test));
    assert_eq!(
        std::fs::read(tmp.path().join("dg/model.bin")).unwrap(),
        std::fs::read(tmp.path().join("again/model.bin")).unwrap()
    );
}

#[test]
fn eval_realizable_task_and_purity() {
    let tmp = tempfile::tempdir().unwrap();
    let xs: Vec<Vec<f64>> = (0..300).map(|i| vec![(i % 17) as f64 / 17.0, (i % 7) as f64 / 7.0, (i % 5) as f64]).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![3.0 * x[0] - x[1] + 10.0, 0.5 * x[2] + 2.0 * x[1]]).collect();
    let data = Dataset::new(Matrix::from_rows(xs).unwrap(), Matrix::from_rows(ys).unwrap(), vec![0..2]).unwrap();
    save_dataset(&data.subset(&(0..200).collect::<Vec<_>>()), tmp.path().join("train.jsonl"), None, None).unwrap();
    save_dataset(&data.subset(&(200..300).collect::<Vec<_>>()), tmp.path().join("val.jsonl"), None, None).unwrap();
    let body = "seed = 1\n[task.files]\ntrain = \"train.jsonl\"\nval = \"val.jsonl\"\n[model]\nhidden = []\n[train]\nloss = \"l2\"\npatience = 20\n";
    let cfg = write_config(tmp.path(), "c.toml", body);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let model = out.join("model.bin");
    let train = tmp.path().join("train.jsonl");
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    ok(&["eval", "--model", s(&model), "--data", s(&train), "--out", s(&e1)]);
    ok(&["eval", "--model", s(&model), "--data", s(&train), "--out", s(&e2)]);
    let a = std::fs::read(e1.join("metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(e2.join("metrics.json")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(m["mae"].as_f64().unwrap() < 1e-3, "{m}");
}

#[test]
fn eval_with_mismatched_dimensions_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}[train]\nloss = \"l2\"\n"));
    ok(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    let other = write_config(tmp.path(), "o.toml", "seed = 1\n[task.synthetic]\nn_train = 20\nn_val = 5\nn_test = 5\ninput_dim = 3\n");
    ok(&["generate", "--config", s(&other), "--out", s(&tmp.path().join("o"))]);
    let out = run(&[
        "eval",
        "--model",
        s(&tmp.path().join("run/model.bin")),
        "--data",
        s(&tmp.path().join("o/test.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "seed = 1\n[task.synthetic]\nn_trian = 5\n");
    let out = run(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "d.toml", "seed = 1\n[task.synthetic]\n[train.sgd]\nlearning_rate = -1.0\n");
    let out = run(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_table_and_isolated_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{SMALL}[sweep]\nscheme = \"lugo\"\nfractions = [0.0, 0.2]\nlosses = [\"l2\", \"biweight\", \"deepgum\"]\nseeds = [1, 2]\n[sweep.overrides.biweight]\nlearning_rate = -0.5\n"
    );
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out), "--threads", "2"]);
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3 * 2);
    for r in &rows {
        let failed = r.split(',').nth(4).unwrap().is_empty();
        assert_eq!(failed, r.contains(",biweight,"), "{r}");
    }
    assert!(out.join("summary.csv").exists());
}

#[test]
fn em_fit_on_residual_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..400 {
        let v = if i % 4 == 0 { (i as f64 * 0.37).sin() * 20.0 } else { ((i * 7919) % 101) as f64 / 101.0 - 0.5 };
        lines.push_str(&format!("[{v}]\n"));
    }
    let res = tmp.path().join("res.jsonl");
    std::fs::write(&res, lines).unwrap();
    ok(&["em-fit", "--residuals", s(&res), "--granularity", "sample", "--out", s(tmp.path())]);
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("em_fit.json")).unwrap()).unwrap();
    let ll: Vec<f64> = fit["log_likelihoods"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    let pi = fit["params"]["units"][0]["pi"].as_f64().unwrap();
    assert!((0.6..0.9).contains(&pi), "pi {pi}");
    assert_eq!(std::fs::read_to_string(tmp.path().join("responsibilities.jsonl")).unwrap().lines().count(), 400);
}
