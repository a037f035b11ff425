use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_stream, Dataset, ImageBox};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mixture::Granularity;
use crate::net::{Activation, Regressor};

const TEACHER_STREAM: u64 = 1;
const CALIBRATION_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const TEACHER_HIDDEN: usize = 16;
const CALIBRATION_SAMPLES: usize = 4096;

/// Shape of the synthetic landmark regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTask {
    pub input_dim: usize,
    pub n_landmarks: usize,
    pub inlier_noise_std: f64,
    #[serde(rename = "box")]
    pub bounds: ImageBox,
}

impl Default for TeacherTask {
    fn default() -> Self {
        Self { input_dim: 16, n_landmarks: 4, inlier_noise_std: 2.0, bounds: ImageBox::default() }
    }
}

impl TeacherTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_landmarks == 0 {
            return Err(Error::config("input_dim and n_landmarks must be positive"));
        }
        if !(self.inlier_noise_std >= 0.0) {
            return Err(Error::config("inlier_noise_std must be non-negative"));
        }
        if !(self.bounds.width > 0.0 && self.bounds.height > 0.0) {
            return Err(Error::config("box width and height must be positive"));
        }
        Ok(())
    }
}

/// The fixed random teacher network of a task.
///
/// A tanh network with one hidden layer whose outputs are affinely rescaled
/// so each coordinate has mean at the box center and standard deviation one
/// eighth of the box side over the unit input cube.
pub fn make_teacher(task: &TeacherTask, seed: u64) -> Result<Regressor<f64>> {
    task.validate()?;
    let d = 2 * task.n_landmarks;
    let mut rng = rng_stream(seed, TEACHER_STREAM);
    let mut net = Regressor::random(task.input_dim, &[TEACHER_HIDDEN], d, Activation::Tanh, &mut rng)?;

    let mut cal = rng_stream(seed, CALIBRATION_STREAM);
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..CALIBRATION_SAMPLES {
        let x: Vec<f64> = (0..task.input_dim).map(|_| cal.random::<f64>()).collect();
        for (j, v) in net.forward(&x)?.into_iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let n = CALIBRATION_SAMPLES as f64;
    let mut scale = Vec::with_capacity(d);
    let mut offset = Vec::with_capacity(d);
    for j in 0..d {
        let mean = sum[j] / n;
        let sd = (sq[j] / n - mean * mean).max(1e-12).sqrt();
        let side = if j % 2 == 0 { task.bounds.width } else { task.bounds.height };
        let s = side / 8.0 / sd;
        scale.push(s);
        offset.push(side / 2.0 - s * mean);
    }
    net.fold_output_affine(&scale, &offset)?;
    Ok(net)
}

/// `n` samples of `teacher(x) + noise` with `x` uniform in the unit cube.
/// Targets carry landmark pairs, the task box and an all-inlier mask.
pub fn make_teacher_dataset(n: usize, task: &TeacherTask, seed: u64) -> Result<Dataset> {
    let teacher = make_teacher(task, seed)?;
    let d = teacher.output_dim();
    let mut rng = rng_stream(seed, SAMPLE_STREAM);
    let noise = Normal::new(0.0, task.inlier_noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut xs = Vec::with_capacity(n * task.input_dim);
    let mut ys = Vec::with_capacity(n * d);
    for _ in 0..n {
        let x: Vec<f64> = (0..task.input_dim).map(|_| rng.random::<f64>()).collect();
        let y = teacher.forward(&x)?;
        xs.extend_from_slice(&x);
        if task.inlier_noise_std > 0.0 {
            ys.extend(y.into_iter().map(|v| v + noise.sample(&mut rng)));
        } else {
            ys.extend(y);
        }
    }
    let Granularity::GroupWise(groups) = Granularity::pairs(d) else { unreachable!() };
    let mut ds = Dataset::new(Matrix::from_vec(n, task.input_dim, xs)?, Matrix::from_vec(n, d, ys)?, groups)?;
    ds.outlier_mask = Some(vec![false; n * task.n_landmarks]);
    ds.bounds = Some(task.bounds);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_targets_equal_the_teacher() {
        let task = TeacherTask { inlier_noise_std: 0.0, ..TeacherTask::default() };
        let ds = make_teacher_dataset(50, &task, 3).unwrap();
        let teacher = make_teacher(&task, 3).unwrap();
        for n in 0..ds.len() {
            let y = teacher.forward(ds.inputs.row(n)).unwrap();
            assert!(y.iter().zip(ds.targets.row(n)).all(|(a, b)| a - b == 0.0));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let task = TeacherTask::default();
        assert_eq!(make_teacher_dataset(100, &task, 11).unwrap(), make_teacher_dataset(100, &task, 11).unwrap());
        assert_ne!(make_teacher_dataset(100, &task, 11).unwrap(), make_teacher_dataset(100, &task, 12).unwrap());
    }

    #[test]
    fn residual_spread_matches_noise_level() {
        let task = TeacherTask { inlier_noise_std: 3.0, ..TeacherTask::default() };
        let ds = make_teacher_dataset(10_000, &task, 8).unwrap();
        let teacher = make_teacher(&task, 8).unwrap();
        let mut sq = 0.0;
        let mut count = 0.0;
        for n in 0..ds.len() {
            let y = teacher.forward(ds.inputs.row(n)).unwrap();
            for (a, b) in y.iter().zip(ds.targets.row(n)) {
                sq += (b - a) * (b - a);
                count += 1.0;
            }
        }
        let sd = (sq / count).sqrt();
        assert!((sd / 3.0 - 1.0).abs() < 0.05, "residual sd {sd}");
    }

    #[test]
    fn targets_sit_inside_the_box() {
        let ds = make_teacher_dataset(2000, &TeacherTask::default(), 1).unwrap();
        let inside = ds.targets.as_slice().iter().filter(|&&v| (0.0..=224.0).contains(&v)).count();
        assert!(inside as f64 / ds.targets.as_slice().len() as f64 > 0.99);
    }
}
