//! Paired input/target datasets, the synthetic landmark task, outlier
//! injection and the line-delimited dataset files.

mod corrupt;
mod io;
mod synth;

pub use corrupt::{corrupt, ngo_displacement, CorruptionScheme, CorruptionSpec};
pub use io::{header_path, load_dataset, save_dataset, DatasetHeader};
pub use synth::{make_teacher, make_teacher_dataset, TeacherTask};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Valid target space of a landmark task: `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBox {
    pub width: f64,
    pub height: f64,
}

impl Default for ImageBox {
    fn default() -> Self {
        Self { width: 224.0, height: 224.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix<f64>,
    pub targets: Matrix<f64>,
    /// Landmark groups over target coordinates; pairs for 2-D landmarks.
    pub groups: Vec<Range<usize>>,
    /// Ground-truth outlier flag per (sample, group), sample-major.
    pub outlier_mask: Option<Vec<bool>>,
    pub bounds: Option<ImageBox>,
}

impl Dataset {
    pub fn new(inputs: Matrix<f64>, targets: Matrix<f64>, groups: Vec<Range<usize>>) -> Result<Self> {
        let ds = Self { inputs, targets, groups, outlier_mask: None, bounds: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.rows() != self.targets.rows() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                self.inputs.rows(),
                self.targets.rows()
            )));
        }
        if self.inputs.as_slice().iter().chain(self.targets.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        crate::mixture::Granularity::GroupWise(self.groups.clone()).units(self.output_dim().max(1))?;
        if let Some(mask) = &self.outlier_mask {
            if mask.len() != self.len() * self.groups.len() {
                return Err(Error::Shape("outlier mask does not align with samples x groups".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Samples at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let g = self.groups.len();
        Self {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
            groups: self.groups.clone(),
            outlier_mask: self
                .outlier_mask
                .as_ref()
                .map(|m| idx.iter().flat_map(|&i| m[i * g..(i + 1) * g].iter().copied()).collect()),
            bounds: self.bounds,
        }
    }

    /// Consecutive train / validation / test split; the test part takes the rest.
    pub fn split(&self, n_train: usize, n_val: usize) -> Result<(Self, Self, Self)> {
        if n_train + n_val > self.len() {
            return Err(Error::config(format!("cannot split {} samples into {n_train} + {n_val}", self.len())));
        }
        let all: Vec<usize> = (0..self.len()).collect();
        Ok((
            self.subset(&all[..n_train]),
            self.subset(&all[n_train..n_train + n_val]),
            self.subset(&all[n_train + n_val..]),
        ))
    }

    /// Ground-truth outlier flags per (sample, unit): a unit is an outlier
    /// when any landmark group overlapping it is.
    pub fn labels_for(&self, units: &[Range<usize>]) -> Option<Vec<bool>> {
        let mask = self.outlier_mask.as_ref()?;
        let g = self.groups.len();
        Some(
            (0..self.len())
                .flat_map(|n| {
                    units.iter().map(move |u| {
                        self.groups
                            .iter()
                            .enumerate()
                            .any(|(k, grp)| grp.start < u.end && u.start < grp.end && mask[n * g + k])
                    })
                })
                .collect(),
        )
    }

    pub fn outlier_fraction(&self) -> Option<f64> {
        self.outlier_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64)
    }
}

/// Independent, reproducible random stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
