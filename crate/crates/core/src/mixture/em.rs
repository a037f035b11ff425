use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::density::{log_terms, Gaussian};
use super::{Granularity, MixtureParams, Residuals, Responsibilities, UnitParams};
use crate::error::{Error, Result};

/// Step halvings tried on `ln gamma` before the previous `gamma` is kept.
const GAMMA_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Stop once the largest relative parameter change falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Lower bound on the eigenvalues of every covariance.
    pub sigma_floor: f64,
    /// Lower bound on the outlier variance `C2 - C1^2` of each coordinate.
    pub var_floor: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Inlier prior at the first EM invocation.
    pub init_pi: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 100,
            sigma_floor: 1e-6,
            var_floor: 1e-6,
            gamma_min: 1e-12,
            gamma_max: 1e12,
            init_pi: 0.9,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::config("em tol and max_iters must be positive"));
        }
        if !(self.sigma_floor > 0.0 && self.var_floor > 0.0) {
            return Err(Error::config("em floors must be positive"));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min < self.gamma_max) {
            return Err(Error::config("need 0 < gamma_min < gamma_max"));
        }
        if !(self.init_pi > 0.0 && self.init_pi < 1.0) {
            return Err(Error::config("init_pi must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub pi: f64,
    pub det_sigma: f64,
    pub gamma: f64,
}

/// Parameters after one EM iteration; iteration 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIterate {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub units: Vec<UnitSummary>,
}

impl EmIterate {
    pub fn new(iteration: usize, log_likelihood: f64, params: &MixtureParams) -> Self {
        Self {
            iteration,
            log_likelihood,
            units: params
                .units
                .iter()
                .map(|u| UnitSummary { pi: u.pi, det_sigma: u.det_sigma(), gamma: u.gamma })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: MixtureParams,
    /// Posteriors under the final `params`.
    pub responsibilities: Responsibilities,
    pub trace: Vec<EmIterate>,
    pub converged: bool,
}

impl EmFit {
    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.log_likelihood).collect()
    }
}

fn gaussians(params: &MixtureParams) -> Result<Vec<Gaussian>> {
    params
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| Gaussian::new(&u.sigma, u.dim).ok_or(Error::DegenerateCovariance { unit: i }))
        .collect()
}

fn check(residuals: &Residuals, params: &MixtureParams, gran: &Granularity) -> Result<Vec<Range<usize>>> {
    let units = gran.units(residuals.cols())?;
    params.validate_for(&units)?;
    if residuals.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("residuals contain non-finite values".into()));
    }
    Ok(units)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn posterior(log_in: f64, log_out: f64, pi: f64) -> f64 {
    if pi <= 0.0 {
        0.0
    } else if pi >= 1.0 {
        1.0
    } else if log_in >= log_out {
        1.0 / (1.0 + (log_out - log_in).exp())
    } else {
        let e = (log_in - log_out).exp();
        e / (1.0 + e)
    }
}

/// Inlier posterior of every (sample, unit) pair.
pub fn e_step(residuals: &Residuals, params: &MixtureParams, gran: &Granularity) -> Result<Responsibilities> {
    check(residuals, params, gran)?;
    let gs = gaussians(params)?;
    let k = params.units.len();
    let r: Vec<f64> = (0..residuals.rows())
        .into_par_iter()
        .flat_map_iter(|n| {
            let row = residuals.row(n);
            params.units.iter().zip(&gs).map(move |(u, g)| {
                let (li, lo) = log_terms(&row[u.range()], u, g);
                posterior(li, lo, u.pi)
            })
        })
        .collect();
    Responsibilities::new(residuals.rows(), k, r)
}

fn unit_log_likelihood(residuals: &Residuals, unit: &UnitParams, gauss: &Gaussian) -> f64 {
    let per_sample: Vec<f64> = (0..residuals.rows())
        .into_par_iter()
        .map(|n| {
            let (li, lo) = log_terms(&residuals.row(n)[unit.range()], unit, gauss);
            log_add(li, lo)
        })
        .collect();
    per_sample.iter().sum()
}

/// Observed-data log-likelihood `sum_n sum_units ln(pi N + (1 - pi) gamma)`.
pub fn log_likelihood(residuals: &Residuals, params: &MixtureParams, gran: &Granularity) -> Result<f64> {
    check(residuals, params, gran)?;
    let gs = gaussians(params)?;
    Ok(params.units.iter().zip(&gs).map(|(u, g)| unit_log_likelihood(residuals, u, g)).sum())
}

fn floor_eigenvalues(sigma: &[f64], dim: usize, floor: f64) -> Vec<f64> {
    if dim == 1 {
        return vec![sigma[0].max(floor)];
    }
    let m = DMatrix::from_row_slice(dim, dim, sigma);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v.is_nan() { v } else { v.max(floor) });
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = rebuilt[(i, j)];
        }
    }
    out
}

/// Default starting point: `pi = init_pi`, the unweighted residual covariance,
/// and `gamma` the reciprocal volume of the residuals' bounding box.
pub fn init_params(residuals: &Residuals, gran: &Granularity, cfg: &EmConfig) -> Result<MixtureParams> {
    let units = gran.units(residuals.cols())?;
    let n = residuals.rows();
    if n == 0 {
        return Err(Error::Shape("cannot initialize a mixture from zero residuals".into()));
    }
    let min_width = 2.0 * (3.0 * cfg.var_floor).sqrt();
    let params = units
        .iter()
        .map(|range| {
            let d = range.len();
            let mean: Vec<f64> = range
                .clone()
                .map(|j| residuals.column(j).iter().sum::<f64>() / n as f64)
                .collect();
            let mut cov = vec![0.0; d * d];
            for row in residuals.iter_rows() {
                let x = &row[range.clone()];
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] += (x[a] - mean[a]) * (x[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= n as f64);
            let mut volume = 1.0;
            for j in range.clone() {
                let col = residuals.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                volume *= (hi - lo).max(min_width);
            }
            UnitParams {
                start: range.start,
                dim: d,
                pi: cfg.init_pi,
                sigma: floor_eigenvalues(&cov, d, cfg.sigma_floor),
                gamma: (1.0 / volume).clamp(cfg.gamma_min, cfg.gamma_max),
            }
        })
        .collect();
    Ok(MixtureParams { units: params })
}

/// Closed-form parameter update given responsibilities.
///
/// `pi` is the mean responsibility, `sigma` the responsibility-weighted second
/// moment of the residuals, and `1/gamma` the product over the unit's
/// coordinates of `2 sqrt(3 (C2 - C1^2))`, the width of a uniform with the
/// outlier-weighted variance. `previous` supplies `gamma` when a unit holds no
/// outlier mass at all.
pub fn m_step(
    residuals: &Residuals,
    resp: &Responsibilities,
    gran: &Granularity,
    previous: &MixtureParams,
    cfg: &EmConfig,
) -> Result<MixtureParams> {
    let units = check(residuals, previous, gran)?;
    let n = residuals.rows();
    if resp.samples() != n || resp.units() != units.len() {
        return Err(Error::Shape("responsibilities do not match residuals".into()));
    }
    let mut out = Vec::with_capacity(units.len());
    for (u, range) in units.iter().enumerate() {
        let d = range.len();
        let sum_r: f64 = (0..n).map(|i| resp.get(i, u)).sum();
        if !(sum_r > 0.0) {
            return Err(Error::AllOutliers { unit: u });
        }
        let pi = (sum_r / n as f64).min(1.0);

        let mut sigma = vec![0.0; d * d];
        let mut c1 = vec![0.0; d];
        let mut c2 = vec![0.0; d];
        let mut sum_out = 0.0;
        for i in 0..n {
            let r = resp.get(i, u);
            let x = &residuals.row(i)[range.clone()];
            for a in 0..d {
                for b in 0..d {
                    sigma[a * d + b] += r * x[a] * x[b];
                }
            }
            let w = 1.0 - r;
            sum_out += w;
            for a in 0..d {
                c1[a] += w * x[a];
                c2[a] += w * x[a] * x[a];
            }
        }
        sigma.iter_mut().for_each(|v| *v /= sum_r);
        let sigma = floor_eigenvalues(&sigma, d, cfg.sigma_floor);
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCovariance { unit: u });
        }

        let gamma = if sum_out > 0.0 {
            let mut width = 1.0;
            for a in 0..d {
                let m1 = c1[a] / sum_out;
                let m2 = c2[a] / sum_out;
                width *= 2.0 * (3.0 * (m2 - m1 * m1).max(cfg.var_floor)).sqrt();
            }
            (1.0 / width).clamp(cfg.gamma_min, cfg.gamma_max)
        } else {
            previous.units[u].gamma
        };
        out.push(UnitParams { start: range.start, dim: d, pi, sigma, gamma });
    }
    Ok(MixtureParams { units: out })
}

fn relative_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn max_relative_change(old: &UnitParams, new: &UnitParams) -> f64 {
    let num: f64 = old.sigma.iter().zip(&new.sigma).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = old.sigma.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    relative_change(old.pi, new.pi).max(relative_change(old.gamma, new.gamma)).max(num / den)
}

/// Alternates [`e_step`] and [`m_step`] until the parameters stabilize.
///
/// The `gamma` update is a moment match rather than a likelihood maximizer,
/// so on its own it can lower the likelihood. Each unit's proposed `gamma` is
/// therefore accepted along a geometric path from the previous value, taking
/// the longest step (halving from the full step) whose likelihood is no lower
/// than the unit's likelihood before the iteration. When even the `pi` and
/// `sigma` update fails that test the unit keeps its previous parameters. The
/// recorded log-likelihood is thus non-decreasing.
pub fn em_fit(residuals: &Residuals, init: &MixtureParams, gran: &Granularity, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    check(residuals, init, gran)?;
    if residuals.rows() < 2 {
        return Err(Error::Shape("EM needs at least two residuals".into()));
    }
    let mut params = init.clone();
    let mut gauss = gaussians(&params)?;
    let mut unit_ll: Vec<f64> =
        params.units.iter().zip(&gauss).map(|(u, g)| unit_log_likelihood(residuals, u, g)).collect();
    let mut trace = vec![EmIterate::new(0, unit_ll.iter().sum(), &params)];
    let mut converged = false;

    for iteration in 1..=cfg.max_iters {
        let resp = e_step(residuals, &params, gran)?;
        let proposal = m_step(residuals, &resp, gran, &params, cfg)?;
        let mut change: f64 = 0.0;
        let mut next = params.clone();
        for (u, prop) in proposal.units.into_iter().enumerate() {
            let old = &params.units[u];
            let Some((accepted, g, ll)) = accept_monotone(residuals, old, prop, unit_ll[u]) else {
                continue;
            };
            change = change.max(max_relative_change(old, &accepted));
            next.units[u] = accepted;
            gauss[u] = g;
            unit_ll[u] = ll;
        }
        params = next;
        trace.push(EmIterate::new(iteration, unit_ll.iter().sum(), &params));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let responsibilities = e_step(residuals, &params, gran)?;
    Ok(EmFit { params, responsibilities, trace, converged })
}

fn accept_monotone(
    residuals: &Residuals,
    old: &UnitParams,
    proposal: UnitParams,
    old_ll: f64,
) -> Option<(UnitParams, Gaussian, f64)> {
    let gauss = Gaussian::new(&proposal.sigma, proposal.dim)?;
    let (log_old, log_new) = (old.gamma.ln(), proposal.gamma.ln());
    let mut candidate = proposal;
    let mut step = 1.0;
    for _ in 0..=GAMMA_HALVINGS {
        candidate.gamma = if step == 1.0 { candidate.gamma } else { (log_old + step * (log_new - log_old)).exp() };
        let ll = unit_log_likelihood(residuals, &candidate, &gauss);
        if ll >= old_ll {
            return Some((candidate, gauss, ll));
        }
        step *= 0.5;
    }
    candidate.gamma = old.gamma;
    let ll = unit_log_likelihood(residuals, &candidate, &gauss);
    (ll >= old_ll).then_some((candidate, gauss, ll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn column(values: &[f64]) -> Residuals {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    fn unit1(pi: f64, var: f64, gamma: f64) -> MixtureParams {
        MixtureParams::uniform_over(&[0..1], pi, var, gamma)
    }

    #[test]
    fn e_step_hand_values() {
        let g = Granularity::SampleWise;
        let r = e_step(&column(&[0.0, 10.0]), &unit1(0.5, 1.0, 0.1), &g).unwrap();
        assert_relative_eq!(r.get(0, 0), 0.199471 / (0.199471 + 0.05), epsilon = 1e-5);
        assert_relative_eq!(r.get(1, 0), 7.69e-22, max_relative = 0.01);
        let ones = e_step(&column(&[0.0, 50.0, -3e3]), &unit1(1.0, 1.0, 0.1), &g).unwrap();
        assert!(ones.as_slice().iter().all(|&v| v == 1.0));
        let zeros = e_step(&column(&[0.0, 1.0]), &unit1(0.0, 1.0, 0.1), &g).unwrap();
        assert!(zeros.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn m_step_pi_and_sigma() {
        let g = Granularity::SampleWise;
        let res = column(&[1.0, -1.0, 4.0, -4.0]);
        let resp = Responsibilities::new(4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = m_step(&res, &resp, &g, &unit1(0.5, 1.0, 0.1), &EmConfig::default()).unwrap();
        assert_eq!(p.units[0].pi, 0.5);
        assert_relative_eq!(p.units[0].sigma[0], 1.0, max_relative = 1e-12);
        // Outliers at +-4: C1 = 0, C2 = 16, 1/gamma = 2 sqrt(48).
        assert_relative_eq!(1.0 / p.units[0].gamma, 2.0 * 48f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn m_step_uniform_moments_recover_width() {
        // Deterministic midpoint grid on [-5, 5] as the outlier population.
        let n = 100_000;
        let vals: Vec<f64> = (0..n).map(|i| -5.0 + 10.0 * (i as f64 + 0.5) / n as f64).collect();
        let resp = Responsibilities::new(n + 1, 1, vec![0.0; n].into_iter().chain([1.0]).collect()).unwrap();
        let mut with_inlier = vals.clone();
        with_inlier.push(0.0);
        let p = m_step(&column(&with_inlier), &resp, &Granularity::SampleWise, &unit1(0.5, 1.0, 0.1), &EmConfig::default())
            .unwrap();
        assert_relative_eq!(p.units[0].gamma, 0.1, max_relative = 1e-6);
    }

    #[test]
    fn m_step_uniform_moments_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200_000;
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let resp = Responsibilities::new(n, 1, vec![0.0; n]).unwrap();
        // All mass on the outlier side would trip the all-outlier guard, so
        // give one sample a sliver of inlier weight.
        let mut r = resp.as_slice().to_vec();
        r[0] = 1e-9;
        let resp = Responsibilities::new(n, 1, r).unwrap();
        let p = m_step(&column(&vals), &resp, &Granularity::SampleWise, &unit1(0.5, 1.0, 0.1), &EmConfig::default())
            .unwrap();
        assert!((1.0 / p.units[0].gamma - 10.0).abs() < 0.05, "width {}", 1.0 / p.units[0].gamma);
    }

    #[test]
    fn m_step_all_outliers_and_no_outliers() {
        let g = Granularity::SampleWise;
        let res = column(&[1.0, 2.0]);
        let cfg = EmConfig::default();
        let zero = Responsibilities::new(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(m_step(&res, &zero, &g, &unit1(0.5, 1.0, 0.1), &cfg), Err(Error::AllOutliers { unit: 0 })));
        let one = Responsibilities::ones(2, 1);
        let p = m_step(&res, &one, &g, &unit1(0.5, 1.0, 0.37), &cfg).unwrap();
        assert_eq!(p.units[0].gamma, 0.37);
        assert_eq!(p.units[0].pi, 1.0);
    }

    #[test]
    fn m_step_floors_collapsed_covariance() {
        let g = Granularity::SampleWise;
        let res = Matrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]).unwrap();
        let resp = Responsibilities::new(3, 1, vec![1.0, 1.0, 0.5]).unwrap();
        let cfg = EmConfig::default();
        let prev = MixtureParams::uniform_over(&[0..2], 0.5, 1.0, 0.1);
        let p = m_step(&res, &resp, &g, &prev, &cfg).unwrap();
        let gauss = Gaussian::new(&p.units[0].sigma, 2).expect("floored sigma is SPD");
        assert!(gauss.log_det().is_finite());
    }

    #[test]
    fn zero_residuals_push_pi_up_and_floor_sigma() {
        let res = column(&[0.0; 50]);
        let g = Granularity::SampleWise;
        let cfg = EmConfig::default();
        let init = init_params(&res, &g, &cfg).unwrap();
        assert_eq!(init.units[0].sigma[0], cfg.sigma_floor);
        let fit = em_fit(&res, &init, &g, &cfg).unwrap();
        assert!(fit.params.units[0].pi > 0.99, "pi = {}", fit.params.units[0].pi);
        assert_eq!(fit.params.units[0].sigma[0], cfg.sigma_floor);
    }

    fn mixture_sample(rng: &mut ChaCha8Rng, n: usize, inlier: f64, sd: f64, half_width: f64) -> Vec<f64> {
        let normal = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < inlier {
                    normal.sample(rng)
                } else {
                    rng.random_range(-half_width..half_width)
                }
            })
            .collect()
    }

    #[test]
    fn recovers_one_dimensional_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let res = column(&mixture_sample(&mut rng, 10_000, 0.7, 0.5, 5.0));
        let g = Granularity::SampleWise;
        let cfg = EmConfig::default();
        let fit = em_fit(&res, &init_params(&res, &g, &cfg).unwrap(), &g, &cfg).unwrap();
        let u = &fit.params.units[0];
        assert!((0.67..=0.73).contains(&u.pi), "pi {}", u.pi);
        assert!((0.45..=0.55).contains(&u.sigma[0].sqrt()), "sigma {}", u.sigma[0].sqrt());
        assert!((8.5..=11.5).contains(&(1.0 / u.gamma)), "1/gamma {}", 1.0 / u.gamma);
        assert!(fit.converged);
    }

    #[test]
    fn doubling_outlier_spread_halves_gamma() {
        let g = Granularity::SampleWise;
        let cfg = EmConfig::default();
        let fit_gamma = |hw: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let res = column(&mixture_sample(&mut rng, 10_000, 0.7, 0.5, hw));
            em_fit(&res, &init_params(&res, &g, &cfg).unwrap(), &g, &cfg).unwrap().params.units[0].gamma
        };
        let ratio = fit_gamma(5.0) / fit_gamma(10.0);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn one_dimensional_granularities_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res = column(&mixture_sample(&mut rng, 500, 0.8, 1.0, 8.0));
        let cfg = EmConfig::default();
        let fits: Vec<EmFit> = [Granularity::SampleWise, Granularity::GroupWise(vec![0..1]), Granularity::CoordinateWise]
            .iter()
            .map(|g| em_fit(&res, &init_params(&res, g, &cfg).unwrap(), g, &cfg).unwrap())
            .collect();
        assert_eq!(fits[0], fits[1]);
        assert_eq!(fits[0], fits[2]);
    }

    #[test]
    fn em_trace_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..20 {
            let n = rng.random_range(20..400);
            let d = 4;
            let frac = rng.random_range(0.5..0.95);
            let sd = rng.random_range(0.1..2.0);
            let hw = rng.random_range(2.0..20.0);
            let data: Vec<f64> = (0..n).flat_map(|_| mixture_sample(&mut rng, d, frac, sd, hw)).collect();
            let res = Matrix::from_vec(n, d, data).unwrap();
            for g in [Granularity::SampleWise, Granularity::pairs(d), Granularity::CoordinateWise] {
                let cfg = EmConfig::default();
                let fit = em_fit(&res, &init_params(&res, &g, &cfg).unwrap(), &g, &cfg).unwrap();
                for w in fit.log_likelihoods().windows(2) {
                    assert!(w[1] >= w[0] - 1e-9, "case {case} {g:?}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }
}
