use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences for which the exact null
/// distribution is used by default.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of the positive differences `a - b`.
    pub statistic: f64,
    /// Rank sum of the negative differences.
    pub w_minus: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub stars: u8,
    pub method: PValueMethod,
}

impl WilcoxonResult {
    /// True when the first sample tends to be smaller than the second.
    pub fn favors_first(&self) -> bool {
        self.w_minus > self.statistic
    }
}

/// 3 below 0.001, 2 below 0.01, 1 below 0.05.
pub fn stars(p: f64) -> u8 {
    if p < 0.001 {
        3
    } else if p < 0.01 {
        2
    } else if p < 0.05 {
        1
    } else {
        0
    }
}

/// Signed average ranks of the non-zero differences, doubled so that
/// half-integer tie ranks stay integral.
pub fn signed_ranks(diffs: &[f64]) -> Vec<(i64, bool)> {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut out = Vec::with_capacity(nz.len());
    let mut i = 0;
    while i < nz.len() {
        let mut j = i;
        while j + 1 < nz.len() && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, times two
        let doubled = (i + 1 + j + 1) as i64;
        for d in &nz[i..=j] {
            out.push((doubled, *d > 0.0));
        }
        i = j + 1;
    }
    out
}

/// Exact two-sided p-value, by counting sign assignments per doubled rank sum.
pub fn exact_p_value(ranks: &[(i64, bool)]) -> f64 {
    if ranks.is_empty() {
        return 1.0;
    }
    let total: i64 = ranks.iter().map(|r| r.0).sum();
    let observed: i64 = ranks.iter().filter(|r| r.1).map(|r| r.0).sum();
    // count[s] = number of subsets of ranks with doubled sum s
    let mut count = vec![0f64; total as usize + 1];
    count[0] = 1.0;
    let mut reach = 0usize;
    for &(r, _) in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if count[s] != 0.0 {
                count[s + r] += count[s];
            }
        }
        reach += r;
    }
    let all: f64 = count.iter().sum();
    let lower: f64 = count[..=observed as usize].iter().sum();
    let upper: f64 = count[observed as usize..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// Two-sided normal approximation with tie and continuity corrections.
pub fn normal_p_value(ranks: &[(i64, bool)]) -> f64 {
    let n = ranks.len() as f64;
    if ranks.is_empty() {
        return 1.0;
    }
    let w_plus = ranks.iter().filter(|r| r.1).map(|r| r.0 as f64 / 2.0).sum::<f64>();
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted: Vec<i64> = ranks.iter().map(|r| r.0).collect();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Paired two-sided signed-rank test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("signed-rank test needs at least one pair".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFiniteLoss("non-finite paired difference".into()));
    }
    let ranks = signed_ranks(&diffs);
    let w_plus = ranks.iter().filter(|r| r.1).map(|r| r.0 as f64 / 2.0).sum();
    let w_minus = ranks.iter().filter(|r| !r.1).map(|r| r.0 as f64 / 2.0).sum();
    let (p, method) = if ranks.len() <= EXACT_LIMIT {
        (exact_p_value(&ranks), PValueMethod::Exact)
    } else {
        (normal_p_value(&ranks), PValueMethod::Normal)
    };
    Ok(WilcoxonResult { statistic: w_plus, w_minus, p_value: p, n_effective: ranks.len(), stars: stars(p), method })
}
