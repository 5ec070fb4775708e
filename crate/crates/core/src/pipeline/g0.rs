//! Vacuum coupling `g₀` from the slope of `Γ_eff` against pump power.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optomech::PumpScheme;
use crate::pipeline::report::lenient;
use crate::units::{AngularRate, Frequency, Power, HBAR};

pub const MIN_RAMP_POINTS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum G0Error {
    #[error("{scheme:?} ramp has {n} sub-threshold powers, need at least {MIN_RAMP_POINTS}")]
    InsufficientPoints { scheme: PumpScheme, n: usize },
    #[error("no ramp points")]
    Empty,
    #[error("invalid ramp point: {0}")]
    InvalidPoint(String),
}

/// One measured linewidth of a power ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampPoint {
    pub run_id: String,
    pub scheme: PumpScheme,
    /// On-chip pump power.
    pub p_in: Power,
    pub gamma_eff: AngularRate,
    /// 1σ of `gamma_eff`.
    pub gamma_eff_sigma: AngularRate,
    pub kappa_tot: AngularRate,
}

/// How `κ_tot` enters the slope-to-`g₀` inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaCorrection {
    /// `κ_tot(T, P_in)` of each point.
    PerPoint,
    /// One value for the whole ramp.
    Constant(AngularRate),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G0Context {
    pub omega_m: AngularRate,
    pub f_c: Frequency,
    pub kappa_ext: AngularRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSlope {
    pub scheme: PumpScheme,
    pub n_points: usize,
    /// `dΓ_eff/dx` with `Γ_opt = g₀²·x`, in rad²/s².
    #[serde(with = "lenient")]
    pub slope: f64,
    #[serde(with = "lenient")]
    pub slope_sigma: f64,
    /// Fitted `Γ_m`, rad/s.
    #[serde(with = "lenient")]
    pub intercept: f64,
    #[serde(with = "lenient")]
    pub intercept_sigma: f64,
    #[serde(with = "lenient")]
    pub g0_hz: f64,
    #[serde(with = "lenient")]
    pub g0_sigma_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G0Estimate {
    /// `g₀/2π`.
    #[serde(with = "lenient")]
    pub g0_hz: f64,
    #[serde(with = "lenient")]
    pub g0_sigma_hz: f64,
    pub blue: Option<SchemeSlope>,
    pub red: Option<SchemeSlope>,
    /// `|g_blue − g_red|` in combined standard deviations.
    #[serde(with = "lenient")]
    pub discrepancy_sigma: f64,
    pub discrepant: bool,
    /// The slope is zero or has the wrong sign; `g0_hz` is 0 and the relative
    /// uncertainty is infinite.
    pub unresolved: bool,
    pub run_ids: Vec<String>,
}

impl G0Estimate {
    pub fn g0(&self) -> AngularRate {
        AngularRate::two_pi_hz(self.g0_hz)
    }

    pub fn rel_sigma(&self) -> f64 {
        if self.g0_hz > 0.0 {
            self.g0_sigma_hz / self.g0_hz
        } else {
            f64::INFINITY
        }
    }
}

/// `Γ_opt / g₀²` for one point, in s.
pub fn backaction_lever(ctx: &G0Context, p_in: Power, kappa_tot: AngularRate) -> f64 {
    let kt = kappa_tot.as_rad_per_s();
    let om = ctx.omega_m.as_rad_per_s();
    4.0 * ctx.kappa_ext.as_rad_per_s() * p_in.as_watts()
        / (kt * HBAR * ctx.f_c.to_angular().as_rad_per_s() * (om * om + 0.25 * kt * kt))
}

struct Line {
    slope: f64,
    slope_sigma: f64,
    intercept: f64,
    intercept_sigma: f64,
}

/// Weighted straight-line fit; covariance scaled by the reduced χ².
fn weighted_line(x: &[f64], y: &[f64], sigma: &[f64]) -> Line {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let chi2: f64 = w
        .iter()
        .zip(x)
        .zip(y)
        .map(|((w, x), y)| w * (y - intercept - slope * x).powi(2))
        .sum();
    let dof = x.len().saturating_sub(2).max(1) as f64;
    let s2 = chi2 / dof;
    Line {
        slope,
        slope_sigma: (s2 * sw / det).sqrt(),
        intercept,
        intercept_sigma: (s2 * sxx / det).sqrt(),
    }
}

fn scheme_slope(points: &[&RampPoint], scheme: PumpScheme, ctx: &G0Context, corr: KappaCorrection) -> SchemeSlope {
    let x: Vec<f64> = points
        .iter()
        .map(|p| {
            let k = match corr {
                KappaCorrection::PerPoint => p.kappa_tot,
                KappaCorrection::Constant(k) => k,
            };
            backaction_lever(ctx, p.p_in, k)
        })
        .collect();
    let y: Vec<f64> = points.iter().map(|p| p.gamma_eff.as_rad_per_s()).collect();
    // floor keeps noiseless ramps finite
    let s: Vec<f64> = points
        .iter()
        .map(|p| p.gamma_eff_sigma.as_rad_per_s().max(1e-9 * p.gamma_eff.as_rad_per_s().abs()).max(1e-300))
        .collect();
    let line = weighted_line(&x, &y, &s);
    // a change across the ramp at rounding level of Γ_eff counts as no slope
    let x_span = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let g2 = if line.slope.abs() * x_span <= 1e-12 * y_max {
        0.0
    } else {
        match scheme {
            PumpScheme::Blue => -line.slope,
            PumpScheme::Red => line.slope,
        }
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let (g0, g0_sigma) = if g2 > 0.0 {
        let g = g2.sqrt();
        (g / two_pi, line.slope_sigma / (2.0 * g) / two_pi)
    } else {
        (0.0, f64::INFINITY)
    };
    SchemeSlope {
        scheme,
        n_points: points.len(),
        slope: line.slope,
        slope_sigma: line.slope_sigma,
        intercept: line.intercept,
        intercept_sigma: line.intercept_sigma,
        g0_hz: g0,
        g0_sigma_hz: g0_sigma,
    }
}

/// Fit `Γ_eff` against the backaction lever per scheme and combine.
pub fn extract_g0(points: &[RampPoint], ctx: &G0Context, corr: KappaCorrection) -> Result<G0Estimate, G0Error> {
    if points.is_empty() {
        return Err(G0Error::Empty);
    }
    for p in points {
        let vals = [p.p_in.as_watts(), p.gamma_eff.as_rad_per_s(), p.kappa_tot.as_rad_per_s()];
        if vals.iter().any(|v| !v.is_finite()) || p.p_in.as_watts() < 0.0 || p.kappa_tot.as_rad_per_s() <= 0.0 {
            return Err(G0Error::InvalidPoint(p.run_id.clone()));
        }
    }
    let mut per = Vec::new();
    for scheme in [PumpScheme::Blue, PumpScheme::Red] {
        let pts: Vec<&RampPoint> = points.iter().filter(|p| p.scheme == scheme).collect();
        if pts.is_empty() {
            per.push(None);
            continue;
        }
        if pts.len() < MIN_RAMP_POINTS {
            return Err(G0Error::InsufficientPoints { scheme, n: pts.len() });
        }
        per.push(Some(scheme_slope(&pts, scheme, ctx, corr)));
    }
    let red = per.pop().flatten();
    let blue = per.pop().flatten();
    let resolved: Vec<&SchemeSlope> = [&blue, &red].into_iter().flatten().filter(|s| s.g0_hz > 0.0).collect();
    let (g0_hz, g0_sigma_hz) = match resolved.as_slice() {
        [] => (0.0, f64::INFINITY),
        [one] => (one.g0_hz, one.g0_sigma_hz),
        many => {
            let w: Vec<f64> = many.iter().map(|s| 1.0 / s.g0_sigma_hz.powi(2).max(1e-300)).collect();
            let sw: f64 = w.iter().sum();
            let mean = many.iter().zip(&w).map(|(s, w)| s.g0_hz * w).sum::<f64>() / sw;
            (mean, (1.0 / sw).sqrt())
        }
    };
    let discrepancy_sigma = match (&blue, &red) {
        (Some(b), Some(r)) if b.g0_hz > 0.0 && r.g0_hz > 0.0 => {
            let s = (b.g0_sigma_hz.powi(2) + r.g0_sigma_hz.powi(2)).sqrt();
            if s > 0.0 {
                (b.g0_hz - r.g0_hz).abs() / s
            } else if b.g0_hz == r.g0_hz {
                0.0
            } else {
                f64::INFINITY
            }
        }
        _ => 0.0,
    };
    Ok(G0Estimate {
        g0_hz,
        g0_sigma_hz,
        blue,
        red,
        discrepancy_sigma,
        discrepant: discrepancy_sigma > 2.0,
        unresolved: g0_hz == 0.0,
        run_ids: points.iter().map(|p| p.run_id.clone()).collect(),
    })
}
