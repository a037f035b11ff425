use robust_gum::data::{corrupt, make_teacher_dataset, rng_stream, CorruptionScheme, CorruptionSpec, Dataset, TeacherTask};
use robust_gum::mixture::{Granularity, MixtureParams};
use robust_gum::trainer::{self, EmOverride, Phase, StopReason, TrainConfig, Trainer};
use robust_gum::{Activation, Error, LossKind, Matrix, Regressor64, SgdConfig};

fn small_task(seed: u64, fraction: f64) -> (Dataset, Dataset) {
    let all = make_teacher_dataset(900, &TeacherTask::default(), seed).unwrap();
    let (tr, va, _) = all.split(600, 300).unwrap();
    let spec = CorruptionSpec { scheme: CorruptionScheme::Lugo, fraction, seed, ..Default::default() };
    (corrupt(&tr, &spec).unwrap(), corrupt(&va, &CorruptionSpec { seed: seed + 1, ..spec }).unwrap())
}

fn net(seed: u64) -> Regressor64 {
    Regressor64::random(16, &[16], 8, Activation::Tanh, &mut rng_stream(seed, 10)).unwrap()
}

fn quick(loss: LossKind) -> TrainConfig {
    TrainConfig { loss, sgd: SgdConfig { max_epochs: 40, ..Default::default() }, ..Default::default() }
}

#[test]
fn linear_data_without_noise_is_fit_exactly() {
    let mut rng = rng_stream(3, 0);
    use rand::Rng;
    let a = [[1.5, -2.0, 0.5], [0.3, 0.7, -1.1]];
    let make = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> =
            xs.iter().map(|x| a.iter().map(|r| r.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + 4.0).collect()).collect();
        Dataset::new(Matrix::from_rows(xs).unwrap(), Matrix::from_rows(ys).unwrap(), vec![0..2]).unwrap()
    };
    let (tr, va) = (make(400, &mut rng), make(100, &mut rng));
    let cfg = TrainConfig { loss: LossKind::L2, sgd: SgdConfig { max_epochs: 200, ..Default::default() }, ..Default::default() };
    let linear = Regressor64::random(3, &[], 2, Activation::Identity, &mut rng_stream(3, 10)).unwrap();
    let out = trainer::train(linear, &tr, &va, &cfg).unwrap();
    let last_l2 = out.records.iter().filter(|r| r.phase == Phase::L2).map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert!(last_l2 < 1e-4, "validation MSE {last_l2}");
    assert!(out.records.len() <= 203);
    let mse: f64 = va
        .inputs
        .iter_rows()
        .zip(va.targets.iter_rows())
        .map(|(x, y)| out.net.forward(x).unwrap().iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
        .sum::<f64>()
        / va.len() as f64;
    assert!(mse < 1e-4, "folded network MSE {mse}");
}

#[test]
fn empty_validation_set_is_a_config_error() {
    let (tr, va) = small_task(1, 0.0);
    let empty = va.subset(&[]);
    let err = Trainer::<f64>::new(&tr, &empty, &quick(LossKind::L2)).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn all_outlier_em_returns_the_initial_model() {
    let (tr, va) = small_task(2, 0.3);
    let cfg = quick(LossKind::DeepGum);
    let mut t = Trainer::<f64>::new(&tr, &va, &cfg).unwrap();
    let units = t.granularity().units(8).unwrap();
    let hostile = MixtureParams::uniform_over(&units, 0.0, 1.0, 1e-3);
    t = t.with_em_override(EmOverride::Init(hostile));
    let state = t.train_initial(net(2)).unwrap();
    let initial = t.fold(state.net.clone()).unwrap();
    let out = t.train_deepgum(state).unwrap();
    assert_eq!(out.stop, StopReason::AllOutliers);
    assert_eq!(out.net, initial);
    assert!(out.params.is_none());
}

#[test]
fn unit_inlier_prior_degenerates_to_l2() {
    let (tr, va) = small_task(5, 0.2);
    let cfg = quick(LossKind::DeepGum);
    let mut t = Trainer::<f64>::new(&tr, &va, &cfg).unwrap();
    let units = t.granularity().units(8).unwrap();
    t = t.with_em_override(EmOverride::Fixed(MixtureParams::uniform_over(&units, 1.0, 1.0, 1e-3)));
    let state = t.train_initial(net(5)).unwrap();
    let out = t.train_deepgum(state).unwrap();
    let r = out.train_responsibilities.unwrap();
    assert!(r.as_slice().iter().all(|&v| v == 1.0));
    assert!(out.train_outliers.unwrap().iter().all(|&o| !o));
    // The weighted phases only ever saw unit weights: their losses are plain L2.
    for rec in out.records.iter().filter(|r| r.phase == Phase::Sgd) {
        assert!(rec.val_loss.is_finite());
    }
}

#[test]
fn deepgum_outcome_is_deterministic_and_reports_em() {
    let (tr, va) = small_task(7, 0.3);
    let cfg = quick(LossKind::DeepGum);
    let a = trainer::train(net(7), &tr, &va, &cfg).unwrap();
    let b = trainer::train(net(7), &tr, &va, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(!a.em_traces.is_empty());
    for t in &a.em_traces {
        for w in t.iterates.windows(2) {
            assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-9);
        }
    }
    assert_eq!(a.units, Granularity::pairs(8).units(8).unwrap());
}

#[test]
fn l2_outcome_has_no_mixture() {
    let (tr, va) = small_task(8, 0.1);
    let out = trainer::train(net(8), &tr, &va, &quick(LossKind::L2)).unwrap();
    assert!(out.em_traces.is_empty() && out.params.is_none() && out.train_outliers.is_none());
    assert_eq!(out.records.iter().filter(|r| r.phase == Phase::L2Warmup).count(), 3);
}

#[test]
fn m_estimators_flag_gross_errors() {
    let (tr, va) = small_task(9, 0.3);
    for loss in [LossKind::Huber, LossKind::Biweight] {
        let out = trainer::train(net(9), &tr, &va, &quick(loss)).unwrap();
        let flagged = out.train_outliers.unwrap();
        let truth = tr.labels_for(&out.units).unwrap();
        let hits = flagged.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / truth.len() as f64 > 0.8, "{loss:?}: agreement {hits}/{}", truth.len());
    }
}

#[test]
fn single_precision_training_runs() {
    let (tr, va) = small_task(10, 0.3);
    let net32 = net(10).cast::<f32>();
    let out = trainer::train(net32, &tr, &va, &quick(LossKind::DeepGum)).unwrap();
    assert!(out.net.flat_params().iter().all(|v| v.is_finite()));
}
