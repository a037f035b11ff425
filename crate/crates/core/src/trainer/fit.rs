use std::ops::Range;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    classify_outliers, EarlyStopping, EmTrace, EpochRecord, Phase, StopReason, TrainConfig, TrainOutcome,
    TrainState,
};
use crate::data::{rng_stream, Dataset};
use crate::error::{Error, Result};
use crate::losses::{coordinate_loss, mad, LossKind, LossSpec, Normalization};
use crate::matrix::Matrix;
use crate::mixture::{
    e_step, em_fit, init_params, EmFit, EmIterate, Granularity, MixtureParams, Residuals, Responsibilities,
};
use crate::net::{backward_with, sgd_step, Regressor};
use crate::scalar::Scalar;

const SHUFFLE_STREAM: u64 = 11;
/// Input columns with smaller spread are centred but not rescaled.
const MIN_INPUT_STD: f64 = 1e-12;

/// Replaces the EM step of the outer loop, for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum EmOverride {
    #[default]
    None,
    /// Skip EM and use these parameters at every outer iteration.
    Fixed(MixtureParams),
    /// Start the first EM fit from these parameters.
    Init(MixtureParams),
}

/// One split in standardized coordinates, with its raw targets kept for
/// residuals in the original units.
struct Split<T> {
    x: Vec<T>,
    y: Vec<T>,
    raw_y: Matrix<f64>,
}

impl<T: Scalar> Split<T> {
    fn len(&self) -> usize {
        self.raw_y.rows()
    }
}

/// Per-coordinate weights and loss used by one SGD phase.
enum Objective<'a> {
    L2,
    /// Coordinate weights from training and validation responsibilities.
    Weighted { train: &'a Matrix<f64>, val: &'a Matrix<f64> },
    Robust(LossSpec),
}

struct Snapshot<T> {
    net: Regressor<T>,
    params: Option<MixtureParams>,
    resp: Option<Responsibilities>,
}

/// Trains a regressor on one train/validation pair.
///
/// Inputs and targets are standardized internally; networks passed in or
/// held in a [`TrainState`] act on standardized coordinates, and the
/// standardization is folded into the returned network.
pub struct Trainer<T> {
    cfg: TrainConfig,
    gran: Granularity,
    units: Vec<Range<usize>>,
    train: Split<T>,
    val: Split<T>,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    out_mean: Vec<f64>,
    out_std: Vec<f64>,
    /// `(out_std / rms(out_std))^2`, so gradients match the raw-unit loss.
    kappa: Vec<T>,
    input_dim: usize,
    output_dim: usize,
    rng: ChaCha8Rng,
    em_override: EmOverride,
}

fn column_stats(m: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let col = m.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

fn standardize<T: Scalar>(m: &Matrix<f64>, mean: &[f64], std: &[f64]) -> Vec<T> {
    m.iter_rows()
        .flat_map(|row| row.iter().zip(mean).zip(std).map(|((v, mu), s)| T::lit((v - mu) / s)))
        .collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.len() < 2 {
            return Err(Error::config("training set needs at least two samples"));
        }
        if val.is_empty() {
            return Err(Error::config("validation set is empty"));
        }
        if train.input_dim() != val.input_dim() || train.output_dim() != val.output_dim() {
            return Err(Error::Shape("training and validation sets differ in dimensions".into()));
        }
        let gran = cfg.granularity.resolve(&train.groups, train.output_dim());
        let units = gran.units(train.output_dim())?;
        let (in_mean, mut in_std) = column_stats(&train.inputs);
        in_std.iter_mut().for_each(|s| {
            if *s < MIN_INPUT_STD {
                *s = 1.0
            }
        });
        let (out_mean, mut out_std) = column_stats(&train.targets);
        out_std.iter_mut().for_each(|s| {
            if *s < MIN_INPUT_STD {
                *s = 1.0
            }
        });
        let ms = out_std.iter().map(|s| s * s).sum::<f64>() / out_std.len() as f64;
        let kappa = out_std.iter().map(|s| T::lit(s * s / ms)).collect();
        let split = |d: &Dataset| Split {
            x: standardize(&d.inputs, &in_mean, &in_std),
            y: standardize(&d.targets, &out_mean, &out_std),
            raw_y: d.targets.clone(),
        };
        Ok(Self {
            train: split(train),
            val: split(val),
            cfg: cfg.clone(),
            gran,
            units,
            in_mean,
            in_std,
            out_mean,
            out_std,
            kappa,
            input_dim: train.input_dim(),
            output_dim: train.output_dim(),
            rng: rng_stream(cfg.sgd.seed, SHUFFLE_STREAM),
            em_override: EmOverride::None,
        })
    }

    pub fn with_em_override(mut self, hook: EmOverride) -> Self {
        self.em_override = hook;
        self
    }

    pub fn granularity(&self) -> &Granularity {
        &self.gran
    }

    fn check_net(&self, net: &Regressor<T>) -> Result<()> {
        if net.input_dim() != self.input_dim || net.output_dim() != self.output_dim {
            return Err(Error::Shape(format!(
                "network maps {} -> {}, data is {} -> {}",
                net.input_dim(),
                net.output_dim(),
                self.input_dim,
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Residuals `y - phi(x)` in raw target units.
    fn residuals(&self, net: &Regressor<T>, split: &Split<T>) -> Result<Residuals> {
        let (m, d) = (self.input_dim, self.output_dim);
        let rows: Vec<Result<Vec<f64>>> = (0..split.len())
            .into_par_iter()
            .map(|i| {
                let out = net.forward(&split.x[i * m..(i + 1) * m])?;
                Ok(split
                    .raw_y
                    .row(i)
                    .iter()
                    .zip(&out)
                    .enumerate()
                    .map(|(c, (y, o))| y - (o.to_f64_lossless() * self.out_std[c] + self.out_mean[c]))
                    .collect())
            })
            .collect();
        let mut data = Vec::with_capacity(split.len() * d);
        for r in rows {
            data.extend(r?);
        }
        Matrix::from_vec(split.len(), d, data)
    }

    /// Mean over samples of the summed per-coordinate loss, raw units.
    fn criterion(res: &Residuals, weights: Option<&Matrix<f64>>, spec: &LossSpec, scale: &[f64]) -> f64 {
        let total: f64 = res
            .iter_rows()
            .enumerate()
            .map(|(n, row)| {
                row.iter()
                    .enumerate()
                    .map(|(c, &d)| {
                        let w = weights.map_or(1.0, |w| *w.get(n, c));
                        if w == 0.0 {
                            0.0
                        } else {
                            w * coordinate_loss(d, scale[c], spec).0
                        }
                    })
                    .sum::<f64>()
            })
            .sum();
        total / res.rows() as f64
    }

    fn m_scale(&self, train_res: &Residuals, spec: &LossSpec) -> Result<Vec<f64>> {
        Ok(match spec.normalization {
            Normalization::Mad => mad(train_res)?.0,
            Normalization::None => vec![1.0; self.output_dim],
        })
    }

    /// One pass of mini-batch SGD over the shuffled training set.
    fn epoch(&mut self, net: &mut Regressor<T>, weights: Option<&Matrix<f64>>, spec: &LossSpec, scale: &[f64]) -> Result<()> {
        let (m, d) = (self.input_dim, self.output_dim);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = T::lit(self.cfg.sgd.learning_rate);
        let scale: Vec<T> = scale.iter().zip(&self.out_std).map(|(s, sd)| T::lit(s / sd)).collect();
        let train = &self.train;
        let kappa = &self.kappa;
        for batch in order.chunks(self.cfg.sgd.batch_size) {
            let inputs: Vec<&[T]> = batch.iter().map(|&i| &train.x[i * m..(i + 1) * m]).collect();
            let tape = backward_with(net, &inputs, |k, out| {
                let i = batch[k];
                let y = &train.y[i * d..(i + 1) * d];
                (0..d)
                    .map(|c| {
                        let w = weights.map_or(1.0, |w| *w.get(i, c));
                        if w == 0.0 {
                            return T::zero();
                        }
                        let (_, g) = coordinate_loss(y[c] - out[c], scale[c], spec);
                        -(kappa[c] * T::lit(w) * g)
                    })
                    .collect()
            })?;
            sgd_step(net, &tape, lr)?;
        }
        Ok(())
    }

    /// SGD from `start` until the validation criterion stalls for
    /// `patience` epochs; returns the best snapshot, `start` included.
    fn sgd_phase(
        &mut self,
        start: Regressor<T>,
        objective: Objective<'_>,
        phase: Phase,
        outer: usize,
        records: &mut Vec<EpochRecord>,
    ) -> Result<(Regressor<T>, f64)> {
        let (spec, train_w, val_w) = match &objective {
            Objective::L2 => (LossSpec::new(LossKind::L2), None, None),
            Objective::Weighted { train, val } => (LossSpec::new(LossKind::DeepGum), Some(*train), Some(*val)),
            Objective::Robust(spec) => (spec.clone(), None, None),
        };
        let robust = matches!(objective, Objective::Robust(_));
        let unit = vec![1.0; self.output_dim];
        let mut train_res = self.residuals(&start, &self.train)?;
        let mut scale = if robust { self.m_scale(&train_res, &spec)? } else { unit.clone() };
        let val0 = Self::criterion(&self.residuals(&start, &self.val)?, val_w, &spec, &scale);
        let mut stopper = EarlyStopping::new(self.cfg.patience);
        stopper.observe(0, val0);
        let mut best = start.clone();
        let mut net = start;
        for epoch in 1..=self.cfg.sgd.max_epochs {
            self.epoch(&mut net, train_w, &spec, &scale)?;
            train_res = self.residuals(&net, &self.train)?;
            if robust {
                scale = self.m_scale(&train_res, &spec)?;
            }
            let train_loss = Self::criterion(&train_res, train_w, &spec, &scale);
            let val_loss = Self::criterion(&self.residuals(&net, &self.val)?, val_w, &spec, &scale);
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "{phase:?} epoch {epoch} (outer {outer}): train loss {train_loss}, validation loss {val_loss}"
                )));
            }
            debug!("{phase:?} outer {outer} epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
            records.push(EpochRecord { phase, outer, epoch, train_loss, val_loss, pi: None, outlier_fraction: None });
            if stopper.observe(epoch, val_loss) {
                best = net.clone();
            }
            if stopper.should_stop() {
                break;
            }
        }
        Ok((best, stopper.best()))
    }

    fn warmup(&mut self, mut net: Regressor<T>, records: &mut Vec<EpochRecord>) -> Result<Regressor<T>> {
        self.check_net(&net)?;
        let spec = LossSpec::new(LossKind::L2);
        let unit = vec![1.0; self.output_dim];
        for epoch in 1..=self.cfg.warmup_epochs {
            self.epoch(&mut net, None, &spec, &unit)?;
            let train_loss = Self::criterion(&self.residuals(&net, &self.train)?, None, &spec, &unit);
            let val_loss = Self::criterion(&self.residuals(&net, &self.val)?, None, &spec, &unit);
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("warmup epoch {epoch}: train loss {train_loss}")));
            }
            records.push(EpochRecord {
                phase: Phase::L2Warmup,
                outer: 0,
                epoch,
                train_loss,
                val_loss,
                pi: None,
                outlier_fraction: None,
            });
        }
        Ok(net)
    }

    /// Warmup followed by plain L2 training with early stopping.
    pub fn train_initial(&mut self, net: Regressor<T>) -> Result<TrainState<T>> {
        let mut records = Vec::new();
        let net = self.warmup(net, &mut records)?;
        let (net, best) = self.sgd_phase(net, Objective::L2, Phase::L2, 0, &mut records)?;
        info!("L2 stage done after {} epochs, validation loss {best:.6e}", records.len());
        Ok(TrainState {
            net,
            params: None,
            train_responsibilities: None,
            val_responsibilities: None,
            epochs_run: records.len(),
            best_val_loss: best,
            outer: 0,
            records,
            em_traces: Vec::new(),
        })
    }

    fn fit_mixture(&self, res: &Residuals, previous: Option<&MixtureParams>) -> Result<EmFit> {
        match &self.em_override {
            EmOverride::Fixed(p) => {
                let responsibilities = e_step(res, p, &self.gran)?;
                let ll = crate::mixture::log_likelihood(res, p, &self.gran)?;
                Ok(EmFit {
                    params: p.clone(),
                    responsibilities,
                    trace: vec![EmIterate::new(0, ll, p)],
                    converged: true,
                })
            }
            hook => {
                let init = match (previous, hook) {
                    (Some(p), _) => p.clone(),
                    (None, EmOverride::Init(p)) => p.clone(),
                    (None, _) => init_params(res, &self.gran, &self.cfg.em)?,
                };
                em_fit(res, &init, &self.gran, &self.cfg.em)
            }
        }
    }

    /// Outer loop: EM on training residuals, validation posteriors under the
    /// fitted parameters, then responsibility-weighted SGD, until the
    /// validation loss stops decreasing.
    pub fn train_deepgum(&mut self, state: TrainState<T>) -> Result<TrainOutcome<T>> {
        self.check_net(&state.net)?;
        let TrainState { net, mut records, mut em_traces, .. } = state;
        let spec = LossSpec::new(LossKind::DeepGum);
        let unit = vec![1.0; self.output_dim];
        let eps = self.cfg.outer_epsilon;
        let mut prev: Option<Snapshot<T>> = None;
        let mut current = net;
        let mut theta: Option<MixtureParams> = None;

        for outer in 1.. {
            let res_train = self.residuals(&current, &self.train)?;
            let fit = match self.fit_mixture(&res_train, theta.as_ref()) {
                Ok(fit) if fit.responsibilities.as_slice().iter().any(|&r| r > 0.0) => fit,
                Ok(_) | Err(Error::AllOutliers { .. }) => {
                    info!("outer {outer}: every unit classified as outlier, stopping");
                    let keep = prev.unwrap_or(Snapshot { net: current, params: None, resp: None });
                    return self.finish_deepgum(keep, records, em_traces, outer, StopReason::AllOutliers);
                }
                Err(e) => return Err(e),
            };
            em_traces.push(EmTrace { outer, converged: fit.converged, iterates: fit.trace.clone() });
            let res_val = self.residuals(&current, &self.val)?;
            let r_val = e_step(&res_val, &fit.params, &self.gran)?;
            let w_train = fit.responsibilities.coordinate_weights(&self.units, self.output_dim)?;
            let w_val = r_val.coordinate_weights(&self.units, self.output_dim)?;
            let val_loss = Self::criterion(&res_val, Some(&w_val), &spec, &unit);
            let outliers = classify_outliers(&fit.responsibilities, self.cfg.outlier_threshold);
            let frac = outliers.iter().filter(|&&o| o).count() as f64 / outliers.len() as f64;
            records.push(EpochRecord {
                phase: Phase::Em,
                outer,
                epoch: 0,
                train_loss: Self::criterion(&res_train, Some(&w_train), &spec, &unit),
                val_loss,
                pi: Some(fit.params.mean_pi()),
                outlier_fraction: Some(frac),
            });
            info!("outer {outer}: pi {:.4}, outliers {:.4}, validation loss {val_loss:.6e}", fit.params.mean_pi(), frac);

            let here = Snapshot { net: current, params: Some(fit.params.clone()), resp: Some(fit.responsibilities.clone()) };
            if let Some(p) = prev.take() {
                let before = Self::criterion(&self.residuals(&p.net, &self.val)?, Some(&w_val), &spec, &unit);
                if val_loss > before * (1.0 + eps) {
                    return self.finish_deepgum(p, records, em_traces, outer, StopReason::Growth);
                }
                if val_loss >= before * (1.0 - eps) {
                    return self.finish_deepgum(here, records, em_traces, outer, StopReason::Converged);
                }
            }
            if outer > self.cfg.max_outer_iters {
                return self.finish_deepgum(here, records, em_traces, outer, StopReason::MaxOuterIterations);
            }
            let objective = Objective::Weighted { train: &w_train, val: &w_val };
            let (next, _) = self.sgd_phase(here.net.clone(), objective, Phase::Sgd, outer, &mut records)?;
            theta = here.params.clone();
            prev = Some(here);
            current = next;
        }
        unreachable!("the outer loop only exits by returning")
    }

    fn finish_deepgum(
        &self,
        keep: Snapshot<T>,
        records: Vec<EpochRecord>,
        em_traces: Vec<EmTrace>,
        outer: usize,
        stop: StopReason,
    ) -> Result<TrainOutcome<T>> {
        info!("DeepGUM stopped at outer iteration {outer}: {stop:?}");
        let train_outliers = keep.resp.as_ref().map(|r| classify_outliers(r, self.cfg.outlier_threshold));
        Ok(TrainOutcome {
            net: self.fold(keep.net)?,
            loss: LossKind::DeepGum,
            params: keep.params,
            units: self.units.clone(),
            train_responsibilities: keep.resp,
            train_outliers,
            records,
            em_traces,
            outer_iterations: outer,
            stop,
        })
    }

    /// Warmup, then early-stopped training under a Huber or biweight loss.
    pub fn train_m_estimator(&mut self, net: Regressor<T>) -> Result<TrainOutcome<T>> {
        let spec = self.cfg.loss_spec();
        if !spec.kind.is_m_estimator() {
            return Err(Error::config(format!("{} is not an M-estimator loss", spec.kind.name())));
        }
        let mut records = Vec::new();
        let net = self.warmup(net, &mut records)?;
        let (net, _) = self.sgd_phase(net, Objective::Robust(spec.clone()), Phase::Robust, 0, &mut records)?;
        let res = self.residuals(&net, &self.train)?;
        let scale = self.m_scale(&res, &spec)?;
        let outliers = res
            .iter_rows()
            .flat_map(|row| {
                self.units
                    .iter()
                    .map(|u| u.clone().any(|c| (row[c] / scale[c]).abs() > spec.tuning_c))
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(TrainOutcome {
            net: self.fold(net)?,
            loss: spec.kind,
            params: None,
            units: self.units.clone(),
            train_responsibilities: None,
            train_outliers: Some(outliers),
            records,
            em_traces: Vec::new(),
            outer_iterations: 0,
            stop: StopReason::EarlyStopping,
        })
    }

    /// Outcome of the L2 stage alone.
    pub fn finish_l2(&self, state: TrainState<T>) -> Result<TrainOutcome<T>> {
        Ok(TrainOutcome {
            net: self.fold(state.net)?,
            loss: LossKind::L2,
            params: None,
            units: self.units.clone(),
            train_responsibilities: None,
            train_outliers: None,
            records: state.records,
            em_traces: state.em_traces,
            outer_iterations: 0,
            stop: StopReason::EarlyStopping,
        })
    }

    /// The standardized network rewritten to act on raw data.
    pub fn fold(&self, mut net: Regressor<T>) -> Result<Regressor<T>> {
        let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        net.fold_input_standardization(&lit(&self.in_mean), &lit(&self.in_std))?;
        net.fold_output_affine(&lit(&self.out_std), &lit(&self.out_mean))?;
        Ok(net)
    }
}

/// Trains `net` (acting on standardized coordinates) with the configured loss.
pub fn train<T: Scalar>(net: Regressor<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(train, val, cfg)?;
    match cfg.loss {
        LossKind::L2 => {
            let state = trainer.train_initial(net)?;
            trainer.finish_l2(state)
        }
        LossKind::DeepGum => {
            let state = trainer.train_initial(net)?;
            trainer.train_deepgum(state)
        }
        LossKind::Huber | LossKind::Biweight => trainer.train_m_estimator(net),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_teacher_dataset, TeacherTask};
    use crate::net::Activation;

    #[test]
    fn unit_responsibilities_reproduce_plain_l2() {
        let all = make_teacher_dataset(300, &TeacherTask::default(), 4).unwrap();
        let (tr, va, _) = all.split(200, 100).unwrap();
        let cfg = TrainConfig { sgd: crate::net::SgdConfig { max_epochs: 8, ..Default::default() }, ..Default::default() };
        let net = Regressor::<f64>::random(16, &[8], 8, Activation::Tanh, &mut rng_stream(1, 10)).unwrap();
        let ones_t = Matrix::from_vec(200, 8, vec![1.0; 1600]).unwrap();
        let ones_v = Matrix::from_vec(100, 8, vec![1.0; 800]).unwrap();

        let mut a = Trainer::new(&tr, &va, &cfg).unwrap();
        let mut ra = Vec::new();
        let (na, la) = a.sgd_phase(net.clone(), Objective::L2, Phase::L2, 0, &mut ra).unwrap();
        let mut b = Trainer::new(&tr, &va, &cfg).unwrap();
        let mut rb = Vec::new();
        let weighted = Objective::Weighted { train: &ones_t, val: &ones_v };
        let (nb, lb) = b.sgd_phase(net, weighted, Phase::Sgd, 0, &mut rb).unwrap();
        assert_eq!(na, nb);
        assert_eq!(la, lb);
        assert_eq!(ra.iter().map(|r| r.val_loss).collect::<Vec<_>>(), rb.iter().map(|r| r.val_loss).collect::<Vec<_>>());
    }
}
