//! Seeded Monte-Carlo propagation of input uncertainties through a scalar
//! function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InputDistribution {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InputDistribution {
    /// Uniform on `x·(1 ± frac)`: a value "known within ±frac".
    pub fn within(x: f64, frac: f64) -> Self {
        let a = x * (1.0 - frac);
        let b = x * (1.0 + frac);
        Self::Uniform {
            lo: a.min(b),
            hi: a.max(b),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Fixed(x) => x,
            Self::Normal { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).map(|d| d.sample(rng)).unwrap_or(f64::NAN)
                }
            }
            Self::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    lo + (hi - lo) * rng.random::<f64>()
                }
            }
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Self::Fixed(x) => x.is_finite(),
            Self::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Self::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
        }
    }
}

/// Summary of the propagated output distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub n_failed: usize,
    pub mean: f64,
    pub std: f64,
    pub p2_5: f64,
    pub p16: f64,
    pub median: f64,
    pub p84: f64,
    pub p97_5: f64,
}

impl McSummary {
    pub fn failure_rate(&self) -> f64 {
        self.n_failed as f64 / self.n_samples as f64
    }

    /// Half width of the central 95 % interval relative to the median.
    pub fn rel_half_width_95(&self) -> f64 {
        0.5 * (self.p97_5 - self.p2_5) / self.median.abs()
    }

    pub fn rel_std(&self) -> f64 {
        self.std / self.mean.abs()
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Summary statistics of a sample (linear-interpolated percentiles).
pub fn summarize(values: &[f64], n_failed: usize) -> McSummary {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    McSummary {
        n_samples: n + n_failed,
        n_failed,
        mean,
        std: var.sqrt(),
        p2_5: percentile(&sorted, 0.025),
        p16: percentile(&sorted, 0.16),
        median: percentile(&sorted, 0.5),
        p84: percentile(&sorted, 0.84),
        p97_5: percentile(&sorted, 0.975),
    }
}

/// Push `n_samples` draws of `inputs` through `f`.
///
/// Sample `i` draws from its own ChaCha stream of `seed`, so the result does
/// not depend on thread scheduling. Samples where `f` fails are counted in
/// `n_failed` and left out of the statistics.
pub fn monte_carlo_propagate<F, E>(
    f: F,
    inputs: &[InputDistribution],
    n_samples: usize,
    seed: u64,
) -> Result<McSummary, FitError>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
{
    if n_samples < 100 {
        return Err(FitError::InvalidProblem(format!("need at least 100 samples, got {n_samples}")));
    }
    if let Some(bad) = inputs.iter().find(|d| !d.is_valid()) {
        return Err(FitError::InvalidProblem(format!("invalid input distribution {bad:?}")));
    }
    let outcomes: Vec<Option<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x: Vec<f64> = inputs.iter().map(|d| d.sample(&mut rng)).collect();
            f(&x).ok().filter(|v| v.is_finite())
        })
        .collect();
    let ok: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed = n_samples - ok.len();
    if ok.is_empty() {
        return Err(FitError::InvalidProblem("every Monte-Carlo sample failed".into()));
    }
    Ok(summarize(&ok, failed))
}
