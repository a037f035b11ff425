use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorruptionScheme, CorruptionSpec, ImageBox, TeacherTask};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::net::Activation;
use crate::stats::DEFAULT_FAILURE_THRESHOLD;
use crate::trainer::TrainConfig;

/// Validation-split corruption seeds are the run seed xor this.
pub(crate) const VAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A complete run description, read from a TOML file.
///
/// Every random stream (data, corruption, initialization, shuffling) is
/// derived from `seed`; `train.sgd.seed` is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic(SyntheticTask),
    Files(FileTask),
}

/// Teacher-network landmark task, split consecutively into train, val, test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub n_landmarks: usize,
    pub inlier_noise_std: f64,
    #[serde(rename = "box")]
    pub bounds: ImageBox,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        let t = TeacherTask::default();
        Self {
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            input_dim: t.input_dim,
            n_landmarks: t.n_landmarks,
            inlier_noise_std: t.inlier_noise_std,
            bounds: t.bounds,
        }
    }
}

impl SyntheticTask {
    pub fn teacher(&self) -> TeacherTask {
        TeacherTask {
            input_dim: self.input_dim,
            n_landmarks: self.n_landmarks,
            inlier_noise_std: self.inlier_noise_std,
            bounds: self.bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTask {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// Outliers injected into the training and validation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub scheme: CorruptionScheme,
    pub fraction: f64,
    pub ngo_mean: f64,
    pub ngo_std: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        let s = CorruptionSpec::default();
        Self { scheme: s.scheme, fraction: s.fraction, ngo_mean: s.ngo_mean, ngo_std: s.ngo_std }
    }
}

impl CorruptionConfig {
    pub fn spec(&self, seed: u64) -> CorruptionSpec {
        CorruptionSpec { scheme: self.scheme, fraction: self.fraction, ngo_mean: self.ngo_mean, ngo_std: self.ngo_std, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32], activation: Activation::Tanh, precision: Precision::F64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Landmark error over `scale` above which a prediction fails.
    pub failure_threshold: f64,
    /// Per-sample error scale; defaults to the dataset box width, else 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { failure_threshold: DEFAULT_FAILURE_THRESHOLD, scale: None }
    }
}

/// SGD settings that replace the `train.sgd` values for one loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub scheme: CorruptionScheme,
    pub fractions: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    /// Keyed by loss name.
    pub overrides: BTreeMap<String, SgdOverride>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scheme: CorruptionScheme::Lugo,
            fractions: (0..=6).map(|i| i as f64 / 10.0).collect(),
            losses: vec![LossKind::L2, LossKind::Huber, LossKind::Biweight, LossKind::DeepGum],
            seeds: vec![0, 1, 2],
            overrides: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// A synthetic-task configuration with every other block at its default.
    pub fn synthetic(seed: u64) -> Self {
        Self {
            seed,
            out: None,
            task: TaskConfig::Synthetic(SyntheticTask::default()),
            corruption: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Reads a config file; relative dataset paths are taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (TaskConfig::Files(files), Some(dir)) = (&mut cfg.task, path.parent()) {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            rebase(&mut files.train);
            rebase(&mut files.val);
            if let Some(t) = files.test.as_mut() {
                rebase(t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Copies the run seed into every derived seed field.
    pub fn resolved(mut self) -> Self {
        self.train.sgd.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.eval.failure_threshold > 0.0) || self.eval.scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::config("eval failure_threshold and scale must be positive"));
        }
        if let Some(c) = &self.corruption {
            c.spec(self.seed).validate()?;
        }
        match &self.task {
            TaskConfig::Synthetic(t) => {
                t.teacher().validate()?;
                if t.n_train < 2 || t.n_val == 0 {
                    return Err(Error::config("synthetic task needs n_train >= 2 and n_val >= 1"));
                }
            }
            TaskConfig::Files(f) => {
                for p in [Some(&f.train), Some(&f.val), f.test.as_ref()].into_iter().flatten() {
                    if !p.exists() {
                        return Err(Error::config(format!("dataset {} does not exist", p.display())));
                    }
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.fractions.is_empty() || s.losses.is_empty() || s.seeds.is_empty() {
                return Err(Error::config("sweep needs at least one fraction, loss and seed"));
            }
            for key in s.overrides.keys() {
                if !s.losses.iter().any(|l| l.name() == key) {
                    return Err(Error::config(format!("sweep override for unknown or unused loss {key:?}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::synthetic(4);
        cfg.corruption = Some(CorruptionConfig { fraction: 0.3, ..Default::default() });
        cfg.sweep = Some(SweepConfig::default());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg.clone().resolved());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[task.synthetic]\nn_train = 100\n").unwrap();
        assert_eq!(cfg.train.sgd.seed, 3);
        let TaskConfig::Synthetic(t) = &cfg.task else { panic!() };
        assert_eq!((t.n_train, t.n_val), (100, 1000));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_rejected() {
        assert!(RunConfig::from_toml_str("[task.synthetic]\n").is_err());
        assert!(RunConfig::from_toml_str("seed = 1\n[task.synthetic]\nn_trian = 5\n").is_err());
        assert!(RunConfig::from_toml_str("seed = 1\n[task.synthetic]\n[train]\nlos = \"l2\"\n").is_err());
    }

    #[test]
    fn missing_dataset_files_fail_validation() {
        let cfg = RunConfig::from_toml_str("seed = 1\n[task.files]\ntrain = \"/nonexistent/a\"\nval = \"/nonexistent/b\"\n")
            .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
