use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_stream, Dataset};
use crate::error::{Error, Result};

const CORRUPTION_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionScheme {
    /// Landmarks shifted by a Gaussian-distributed distance.
    Ngo,
    /// Landmarks resampled uniformly over the box.
    Lugo,
    /// Every landmark of a subset of samples resampled uniformly.
    Gugo,
}

impl CorruptionScheme {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionScheme::Ngo => "ngo",
            CorruptionScheme::Lugo => "lugo",
            CorruptionScheme::Gugo => "gugo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub scheme: CorruptionScheme,
    pub fraction: f64,
    pub ngo_mean: f64,
    pub ngo_std: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { scheme: CorruptionScheme::Lugo, fraction: 0.0, ngo_mean: 25.0, ngo_std: 2.0, seed: 0 }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(format!("corruption fraction must lie in [0, 1], got {}", self.fraction)));
        }
        if !(self.ngo_std >= 0.0 && self.ngo_mean.is_finite()) {
            return Err(Error::config("ngo_mean must be finite and ngo_std non-negative"));
        }
        Ok(())
    }
}

/// One NGO shift distance; negative draws are redrawn.
pub fn ngo_displacement<R: Rng + ?Sized>(rng: &mut R, spec: &CorruptionSpec) -> Result<f64> {
    let dist = Normal::new(spec.ngo_mean, spec.ngo_std).map_err(|e| Error::config(e.to_string()))?;
    if spec.ngo_mean <= 0.0 && spec.ngo_std == 0.0 {
        return Err(Error::config("ngo displacement can never be positive"));
    }
    loop {
        let d = dist.sample(rng);
        if d >= 0.0 {
            return Ok(d);
        }
    }
}

/// Injects outliers into the targets and records which landmarks changed.
///
/// NGO and l-UGO pick `fraction` of all landmarks regardless of sample; g-UGO
/// picks `fraction` of the samples and replaces all their landmarks. NGO
/// shifts are clipped to the box.
pub fn corrupt(data: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut out = data.clone();
    let n = data.len();
    let g = data.groups.len();
    let mut mask = data.outlier_mask.clone().unwrap_or_else(|| vec![false; n * g]);
    if spec.fraction == 0.0 {
        out.outlier_mask = Some(mask);
        return Ok(out);
    }
    let bounds = data
        .bounds
        .ok_or_else(|| Error::config("corruption needs a dataset with box metadata"))?;
    if data.groups.iter().any(|r| r.len() != 2) {
        return Err(Error::config("corruption schemes need 2-D landmark groups"));
    }
    let mut rng = rng_stream(spec.seed, CORRUPTION_STREAM);
    let uniform_point = |rng: &mut rand_chacha::ChaCha8Rng| {
        (rng.random_range(0.0..=bounds.width), rng.random_range(0.0..=bounds.height))
    };

    let chosen: Vec<usize> = match spec.scheme {
        CorruptionScheme::Ngo | CorruptionScheme::Lugo => {
            let total = n * g;
            let k = (spec.fraction * total as f64).round() as usize;
            index::sample(&mut rng, total, k).into_vec()
        }
        CorruptionScheme::Gugo => {
            let k = (spec.fraction * n as f64).round() as usize;
            index::sample(&mut rng, n, k)
                .into_iter()
                .flat_map(|s| (0..g).map(move |l| s * g + l))
                .collect()
        }
    };

    for unit in chosen {
        let (s, l) = (unit / g, unit % g);
        let c = data.groups[l].start;
        let row = out.targets.row_mut(s);
        match spec.scheme {
            CorruptionScheme::Ngo => {
                let d = ngo_displacement(&mut rng, spec)?;
                let angle = rng.random_range(0.0..TAU);
                row[c] = (row[c] + d * angle.cos()).clamp(0.0, bounds.width);
                row[c + 1] = (row[c + 1] + d * angle.sin()).clamp(0.0, bounds.height);
            }
            CorruptionScheme::Lugo | CorruptionScheme::Gugo => {
                let (x, y) = uniform_point(&mut rng);
                row[c] = x;
                row[c + 1] = y;
            }
        }
        mask[unit] = true;
    }
    out.outlier_mask = Some(mask);
    Ok(out)
}
