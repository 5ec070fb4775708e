//! Saturable two-level-system losses.
//!
//! Cavity internal damping:
//!
//! ```text
//! κ_in(T, P) = κ_TLS⁰ · tanh(h f_c / 2k_B T) · (P⁰/P)/(1 + P⁰/P) + κ_BCS(T)
//! κ_BCS(T)   = κ_dielec⁰ + α · (T_c/T) · exp(−Δ(0)/k_B T),   Δ(0) = 3.3 k_B T_c
//! ```
//!
//! TWPA insertion transmission:
//!
//! ```text
//! δ(T, P) = 1 − λ₀ · tanh(h f / 2k_B T) / sqrt(1 + (P/P⁰)^β)
//! ```
//!
//! The critical powers `P⁰(T)` are free per-temperature values kept in a
//! [`TempTable`] and interpolated log-linearly in between.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{self, FitError, FitProblem, FitResult, SolveOptions};
use crate::units::{AngularRate, Frequency, Power, Temperature, BOLTZMANN, PLANCK};

/// Gap-to-critical-temperature ratio, `Δ(0) = 3.3 k_B T_c`.
pub const GAP_RATIO: f64 = 3.3;

/// Temperatures closer than this (relative) are treated as one slice.
const SLICE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("temperature {t_k} K outside table range [{min_k}, {max_k}] K and extrapolation is off")]
    OutOfRange { t_k: f64, min_k: f64, max_k: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("parameter {parameter} is not constrained by the data")]
    Unidentifiable { parameter: String },
    #[error("TLS fit failed: {0}")]
    Fit(#[from] FitError),
}

/// Values tabulated against temperature, keys strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempTable {
    /// `(temperature in K, value)`.
    pub points: Vec<(f64, f64)>,
}

impl TempTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, TlsError> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let t = Self { points };
        t.validate()?;
        Ok(t)
    }

    pub fn constant(t_k: f64, value: f64) -> Self {
        Self {
            points: vec![(t_k, value)],
        }
    }

    fn validate(&self) -> Result<(), TlsError> {
        if self.points.is_empty() {
            return Err(TlsError::InvalidParams("empty temperature table".into()));
        }
        if self.points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(TlsError::InvalidParams("table temperatures must be strictly increasing".into()));
        }
        if self.points.iter().any(|(t, v)| !(t.is_finite() && *t > 0.0 && v.is_finite())) {
            return Err(TlsError::InvalidParams("table entries must be finite with T > 0".into()));
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    fn locate(&self, t: f64, extrapolate: bool) -> Result<Option<usize>, TlsError> {
        let (lo, hi) = self.range();
        let inside = t >= lo * (1.0 - SLICE_TOLERANCE) && t <= hi * (1.0 + SLICE_TOLERANCE);
        if !inside && !extrapolate {
            return Err(TlsError::OutOfRange {
                t_k: t,
                min_k: lo,
                max_k: hi,
            });
        }
        // None: clamp to an end value
        if t <= lo || t >= hi || self.points.len() == 1 {
            return Ok(None);
        }
        Ok(Some(self.points.partition_point(|p| p.0 <= t) - 1))
    }

    fn end_value(&self, t: f64) -> f64 {
        if t <= self.points[0].0 {
            self.points[0].1
        } else {
            self.points[self.points.len() - 1].1
        }
    }

    /// Linear interpolation of the value; clamped outside when extrapolating.
    pub fn linear(&self, t: f64, extrapolate: bool) -> Result<f64, TlsError> {
        Ok(match self.locate(t, extrapolate)? {
            None => self.end_value(t),
            Some(i) => {
                let (t0, v0) = self.points[i];
                let (t1, v1) = self.points[i + 1];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        })
    }

    /// Interpolation of `ln(value)` linear in T; values must be positive.
    pub fn log_linear(&self, t: f64, extrapolate: bool) -> Result<f64, TlsError> {
        Ok(match self.locate(t, extrapolate)? {
            None => self.end_value(t),
            Some(i) => {
                let (t0, v0) = self.points[i];
                let (t1, v1) = self.points[i + 1];
                (v0.ln() + (v1.ln() - v0.ln()) * (t - t0) / (t1 - t0)).exp()
            }
        })
    }
}

/// `tanh(h f / 2 k_B T)`.
pub fn tanh_factor(f: Frequency, t: Temperature) -> f64 {
    (PLANCK * f.as_hz() / (2.0 * BOLTZMANN * t.as_kelvin())).tanh()
}

/// Cavity TLS and quasiparticle loss parameters. Rates are angular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsLossParams {
    /// Frequency entering the tanh factor (the cavity resonance).
    pub f_c: Frequency,
    pub kappa_tls0: AngularRate,
    /// `P_cav⁰(T)` in watts (on-chip).
    pub p_cav0: TempTable,
    pub kappa_dielec0: AngularRate,
    pub alpha: AngularRate,
    pub t_c: Temperature,
}

impl TlsLossParams {
    pub fn validate(&self) -> Result<(), TlsError> {
        let rates = [
            ("kappa_tls0", self.kappa_tls0),
            ("kappa_dielec0", self.kappa_dielec0),
            ("alpha", self.alpha),
        ];
        for (name, r) in rates {
            let v = r.as_rad_per_s();
            if !(v.is_finite() && v >= 0.0) {
                return Err(TlsError::InvalidParams(format!("{name} = {v} must be >= 0")));
            }
        }
        self.p_cav0.validate()?;
        if self.p_cav0.points.iter().any(|(_, p)| *p <= 0.0) {
            return Err(TlsError::InvalidParams("p_cav0 entries must be > 0".into()));
        }
        if !(self.t_c.as_kelvin() > 0.0) {
            return Err(TlsError::InvalidParams("t_c must be > 0".into()));
        }
        Ok(())
    }

    pub fn p_cav0_at(&self, t: Temperature, extrapolate: bool) -> Result<Power, TlsError> {
        self.p_cav0.log_linear(t.as_kelvin(), extrapolate).map(Power::watts)
    }
}

/// `κ_TLS(T) = κ_TLS⁰ · tanh(h f_c / 2 k_B T)`.
pub fn kappa_tls(params: &TlsLossParams, t: Temperature) -> AngularRate {
    AngularRate::rad_per_s(params.kappa_tls0.as_rad_per_s() * tanh_factor(params.f_c, t))
}

fn mattis_bardeen(alpha: f64, t_c: f64, t: f64) -> f64 {
    alpha * (t_c / t) * (-GAP_RATIO * t_c / t).exp()
}

/// Dielectric plus Mattis-Bardeen quasiparticle damping.
///
/// The quasiparticle term is only meaningful for `T < T_c/2`; above that a
/// warning is logged.
pub fn kappa_bcs(params: &TlsLossParams, t: Temperature) -> AngularRate {
    let tk = t.as_kelvin();
    let tc = params.t_c.as_kelvin();
    if tk > 0.5 * tc {
        warn!("Mattis-Bardeen term evaluated at {tk} K, above T_c/2 = {} K", 0.5 * tc);
    }
    AngularRate::rad_per_s(params.kappa_dielec0.as_rad_per_s() + mattis_bardeen(params.alpha.as_rad_per_s(), tc, tk))
}

/// `P⁰/P / (1 + P⁰/P)`, written to stay finite at `P = 0`.
fn saturation(p: f64, p0: f64) -> f64 {
    p0 / (p0 + p)
}

/// Internal cavity damping at temperature `t` and on-chip power `p_in`.
pub fn kappa_in(
    params: &TlsLossParams,
    t: Temperature,
    p_in: Power,
    extrapolate: bool,
) -> Result<AngularRate, TlsError> {
    let p0 = params.p_cav0_at(t, extrapolate)?.as_watts();
    let tls = kappa_tls(params, t).as_rad_per_s() * saturation(p_in.as_watts(), p0);
    Ok(AngularRate::rad_per_s(tls + kappa_bcs(params, t).as_rad_per_s()))
}

/// TWPA TLS parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwpaTlsParams {
    /// Frequency entering the tanh factor.
    pub f_ref: Frequency,
    pub lambda0: f64,
    pub beta: f64,
    /// `P_twpa⁰(T)` in watts at the TWPA input.
    pub p_twpa0: TempTable,
}

impl TwpaTlsParams {
    pub fn validate(&self) -> Result<(), TlsError> {
        if !(self.lambda0 >= 0.0 && self.lambda0 < 1.0) {
            return Err(TlsError::InvalidParams(format!("lambda0 = {} must be in [0, 1)", self.lambda0)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TlsError::InvalidParams(format!("beta = {} must be > 0", self.beta)));
        }
        self.p_twpa0.validate()?;
        if self.p_twpa0.points.iter().any(|(_, p)| *p <= 0.0) {
            return Err(TlsError::InvalidParams("p_twpa0 entries must be > 0".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, t: Temperature) -> f64 {
        self.lambda0 * tanh_factor(self.f_ref, t)
    }

    pub fn p_twpa0_at(&self, t: Temperature, extrapolate: bool) -> Result<Power, TlsError> {
        self.p_twpa0.log_linear(t.as_kelvin(), extrapolate).map(Power::watts)
    }
}

/// `1/sqrt(1 + (P/P⁰)^β)`, the unsaturated fraction of TWPA TLS absorption.
pub fn twpa_suppression(p: f64, p0: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (p / p0).powf(beta)).sqrt()
}

/// Power transmission `δ(T, P)` through the TWPA with its pump off.
pub fn twpa_transmission(params: &TwpaTlsParams, t: Temperature, p_in: Power, extrapolate: bool) -> Result<f64, TlsError> {
    let p0 = params.p_twpa0_at(t, extrapolate)?.as_watts();
    Ok(1.0 - params.lambda(t) * twpa_suppression(p_in.as_watts(), p0, params.beta))
}

/// One measured total damping rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub t: Temperature,
    /// On-chip power.
    pub p_in: Power,
    pub kappa_tot: AngularRate,
}

/// One measured TWPA transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionPoint {
    pub t: Temperature,
    /// Power at the TWPA input.
    pub p_in: Power,
    pub delta: f64,
}

/// RMS residual of one temperature slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResidual {
    pub t_k: f64,
    pub n_points: usize,
    pub rms: f64,
}

/// Whether the quasiparticle term is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BcsMode {
    /// Fit when at least two slices lie at or above 200 mK.
    #[default]
    Auto,
    Fit,
    /// Hold `α` at zero.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TlsFitOptions {
    pub bcs: BcsMode,
    pub solve: SolveOptions,
}

/// Joint fit of the cavity loss model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsCavityFit {
    pub params: TlsLossParams,
    pub kappa_ext: AngularRate,
    /// Parameters: `kappa_tls0_hz, kappa_dielec0_hz, [alpha_hz, t_c_k,] log10_p0[i]`.
    pub fit: FitResult,
    pub bcs_fitted: bool,
    pub slices: Vec<SliceResidual>,
}

impl TlsCavityFit {
    fn named_sigma(&self, name: &str) -> f64 {
        self.fit.index_of(name).map(|i| self.fit.sigma(i)).unwrap_or(f64::NAN)
    }

    /// 1σ of `κ_TLS⁰/2π` in Hz.
    pub fn kappa_tls0_sigma_hz(&self) -> f64 {
        self.named_sigma("kappa_tls0_hz")
    }

    pub fn kappa_dielec0_sigma_hz(&self) -> f64 {
        self.named_sigma("kappa_dielec0_hz")
    }

    /// Linearized 1σ of `α/2π`; the fit itself runs on `log10 α`.
    pub fn alpha_sigma_hz(&self) -> f64 {
        self.params.alpha.as_hz() * std::f64::consts::LN_10 * self.log10_alpha_sigma()
    }

    pub fn log10_alpha_sigma(&self) -> f64 {
        self.named_sigma("log10_alpha_hz")
    }

    pub fn t_c_sigma_k(&self) -> f64 {
        self.named_sigma("t_c_k")
    }

    /// 1σ of `P_cav⁰` (W) for slice `i`.
    pub fn p_cav0_sigma_w(&self, i: usize) -> f64 {
        let p = self.params.p_cav0.points[i].1;
        p * std::f64::consts::LN_10 * self.named_sigma(&format!("log10_p_cav0[{i}]"))
    }

    pub fn kappa_tot(&self, t: Temperature, p_in: Power, extrapolate: bool) -> Result<AngularRate, TlsError> {
        Ok(self.kappa_ext + kappa_in(&self.params, t, p_in, extrapolate)?)
    }
}

/// Joint fit of the TWPA transmission model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsTwpaFit {
    pub params: TwpaTlsParams,
    /// Parameters: `lambda0, beta, log10_p0[i]`.
    pub fit: FitResult,
    pub slices: Vec<SliceResidual>,
}

impl TlsTwpaFit {
    pub fn lambda0_sigma(&self) -> f64 {
        self.fit.sigma(0)
    }

    pub fn beta_sigma(&self) -> f64 {
        self.fit.sigma(1)
    }

    pub fn p_twpa0_sigma_w(&self, i: usize) -> f64 {
        let p = self.params.p_twpa0.points[i].1;
        p * std::f64::consts::LN_10 * self.fit.sigma(2 + i)
    }
}

/// Group point indices into temperature slices, ascending in T.
fn slices_by_temperature(ts: &[f64]) -> Vec<(f64, Vec<usize>)> {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| ts[a].total_cmp(&ts[b]));
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in order {
        match out.last_mut() {
            Some((t, idx)) if (ts[i] - *t).abs() <= SLICE_TOLERANCE * t.abs() => idx.push(i),
            _ => out.push((ts[i], vec![i])),
        }
    }
    out
}

fn check_slices(slices: &[(f64, Vec<usize>)], powers: &[f64], what: &str) -> Result<(), TlsError> {
    if slices.is_empty() {
        return Err(TlsError::InsufficientData(format!("no {what} points")));
    }
    for (i, (t, idx)) in slices.iter().enumerate() {
        if idx.len() < 5 {
            return Err(TlsError::InsufficientData(format!(
                "{} power points at {t} K, need at least 5",
                idx.len()
            )));
        }
        let first = powers[idx[0]];
        if idx.iter().all(|&j| powers[j] == first) {
            return Err(TlsError::Unidentifiable {
                parameter: format!("{what}_p0[{i}] (T = {t} K): no power variation"),
            });
        }
    }
    Ok(())
}

/// Reject a fit whose Jacobian has an (almost) empty column.
fn check_identifiable<'a>(problem: &FitProblem<'a>, result: &FitResult, names: &[String]) -> Result<(), TlsError> {
    let n = result.params.len();
    let lower = vec![f64::NEG_INFINITY; n];
    let upper = vec![f64::INFINITY; n];
    let scales: Vec<f64> = result.params.iter().map(|p| p.abs().max(1e-3)).collect();
    let f = |p: &[f64]| problem.residuals_at(p);
    let jac = fit::numeric_jacobian(&f, &result.params, &lower, &upper, &scales, fit::StepPolicy::default())?;
    let norms: Vec<f64> = (0..n).map(|j| jac.column(j).norm() * scales[j]).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if let Some(j) = norms.iter().position(|&c| c <= 1e-9 * max) {
        return Err(TlsError::Unidentifiable {
            parameter: names[j].clone(),
        });
    }
    Ok(())
}

fn interp_log_crossing(ps: &[f64], ys: &[f64], level: f64) -> Option<f64> {
    // ps ascending; ys expected to decrease with power
    for k in 1..ps.len() {
        let (y0, y1) = (ys[k - 1], ys[k]);
        if (y0 - level) * (y1 - level) <= 0.0 && y0 != y1 {
            let u = (level - y0) / (y1 - y0);
            return Some((ps[k - 1].ln() + u * (ps[k].ln() - ps[k - 1].ln())).exp());
        }
    }
    None
}

fn sorted_slice(idx: &[usize], powers: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, f64)> = idx.iter().map(|&j| (powers[j], ys[j])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Joint fit of κ_tot(T, P) = κ_ext + κ_in(T, P).
///
/// Shared parameters are `κ_TLS⁰`, `κ_dielec⁰` and, when enabled, `α` and
/// `T_c`; every temperature slice gets its own `P_cav⁰`. Residuals are
/// relative (`model/data − 1`).
pub fn fit_tls_cavity(
    points: &[KappaPoint],
    kappa_ext: AngularRate,
    f_c: Frequency,
    opts: &TlsFitOptions,
) -> Result<TlsCavityFit, TlsError> {
    if !(kappa_ext.as_rad_per_s() > 0.0) {
        return Err(TlsError::InvalidParams("kappa_ext must be > 0".into()));
    }
    let ts: Vec<f64> = points.iter().map(|p| p.t.as_kelvin()).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.p_in.as_watts()).collect();
    let ktot: Vec<f64> = points.iter().map(|p| p.kappa_tot.as_hz()).collect();
    if ps.iter().chain(&ktot).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(TlsError::InvalidParams("powers and damping rates must be finite and > 0".into()));
    }
    let slices = slices_by_temperature(&ts);
    check_slices(&slices, &ps, "p_cav0")?;
    let k_ext = kappa_ext.as_hz();
    let kin: Vec<f64> = ktot.iter().map(|k| k - k_ext).collect();

    let fit_bcs = match opts.bcs {
        BcsMode::Fit => true,
        BcsMode::Off => false,
        BcsMode::Auto => slices.iter().filter(|(t, _)| *t >= 0.2).count() >= 2,
    };

    // starting point
    let ladders: Vec<(Vec<f64>, Vec<f64>)> = slices.iter().map(|(_, idx)| sorted_slice(idx, &ps, &kin)).collect();
    let high_p_level: Vec<f64> = ladders.iter().map(|(_, y)| *y.last().unwrap()).collect();
    let low_p_level: Vec<f64> = ladders.iter().map(|(_, y)| y[0]).collect();
    let dielec0 = high_p_level.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    let t_low = Temperature::kelvin(slices[0].0);
    let tls0 = ((low_p_level[0] - high_p_level[0]) / tanh_factor(f_c, t_low)).max(1e-3 * k_ext);
    let p0_init: Vec<f64> = ladders
        .iter()
        .map(|(p, y)| {
            let mid = 0.5 * (y[0] + y[y.len() - 1]);
            interp_log_crossing(p, y, mid).unwrap_or_else(|| (p[0].ln() * 0.5 + p[p.len() - 1].ln() * 0.5).exp())
        })
        .collect();
    let (alpha0, tc0) = if fit_bcs {
        let n = slices.len();
        let excess = |i: usize| high_p_level[i] - dielec0;
        let (t1, t2) = (slices[n - 2].0, slices[n - 1].0);
        let (e1, e2) = (excess(n - 2), excess(n - 1));
        let tc = if e1 > 0.0 && e2 > e1 {
            ((e2 * t2) / (e1 * t1)).ln() / (GAP_RATIO * (1.0 / t1 - 1.0 / t2))
        } else {
            1.2
        };
        let tc = tc.clamp(0.3, 20.0);
        let shape = (tc / t2) * (-GAP_RATIO * tc / t2).exp();
        ((e2.max(1e-3 * k_ext)) / shape, tc)
    } else {
        (0.0, 1.2)
    };

    let n_slices = slices.len();
    let slice_of: Vec<usize> = {
        let mut v = vec![0; points.len()];
        for (s, (_, idx)) in slices.iter().enumerate() {
            for &j in idx {
                v[j] = s;
            }
        }
        v
    };
    let tanh_t: Vec<f64> = ts.iter().map(|&t| tanh_factor(f_c, Temperature::kelvin(t))).collect();
    let offset = if fit_bcs { 4 } else { 2 };

    let model = {
        let (ts, ps, tanh_t, slice_of) = (ts.clone(), ps.clone(), tanh_t.clone(), slice_of.clone());
        move |p: &[f64]| -> Vec<f64> {
            let (tls0, diel) = (p[0], p[1]);
            let (alpha, tc) = if fit_bcs { (10f64.powf(p[2]), p[3]) } else { (0.0, 1.0) };
            (0..ts.len())
                .map(|j| {
                    let p0 = 10f64.powf(p[offset + slice_of[j]]);
                    k_ext + tls0 * tanh_t[j] * saturation(ps[j], p0) + diel + mattis_bardeen(alpha, tc, ts[j])
                })
                .collect()
        }
    };
    let data = ktot.clone();
    let residuals = {
        let model = model.clone();
        move |p: &[f64]| -> Vec<f64> { model(p).iter().zip(&data).map(|(m, y)| m / y - 1.0).collect() }
    };

    let mut init = vec![tls0, dielec0];
    let mut lower = vec![0.0, 0.0];
    let mut upper = vec![f64::INFINITY, f64::INFINITY];
    let mut scales = vec![tls0.max(1.0), dielec0.max(tls0).max(1.0)];
    let mut names: Vec<String> = vec!["kappa_tls0_hz".into(), "kappa_dielec0_hz".into()];
    if fit_bcs {
        // α spans decades and trades off against T_c; log scale keeps the
        // valley well conditioned
        init.extend([alpha0.max(1.0).log10(), tc0]);
        lower.extend([-10.0, 0.05]);
        upper.extend([30.0, 50.0]);
        scales.extend([1.0, tc0]);
        names.extend(["log10_alpha_hz".to_string(), "t_c_k".to_string()]);
    }
    for (i, p0) in p0_init.iter().enumerate() {
        init.push(p0.log10());
        lower.push(-30.0);
        upper.push(0.0);
        scales.push(1.0);
        names.push(format!("log10_p_cav0[{i}]"));
    }
    let problem = FitProblem::new(residuals, init)
        .with_bounds(lower, upper)
        .with_scales(scales)
        .with_names(names.clone());
    let result = fit::solve(&problem, &opts.solve)?;
    check_identifiable(&problem, &result, &names)?;

    let p = &result.params;
    let params = TlsLossParams {
        f_c,
        kappa_tls0: AngularRate::two_pi_hz(p[0]),
        p_cav0: TempTable::new(
            slices
                .iter()
                .enumerate()
                .map(|(i, (t, _))| (*t, 10f64.powf(p[offset + i])))
                .collect(),
        )?,
        kappa_dielec0: AngularRate::two_pi_hz(p[1]),
        alpha: AngularRate::two_pi_hz(if fit_bcs { 10f64.powf(p[2]) } else { 0.0 }),
        t_c: Temperature::kelvin(if fit_bcs { p[3] } else { 1.2 }),
    };
    let r = problem.residuals_at(p);
    let slice_rms = slices
        .iter()
        .map(|(t, idx)| SliceResidual {
            t_k: *t,
            n_points: idx.len(),
            rms: (idx.iter().map(|&j| r[j] * r[j]).sum::<f64>() / idx.len() as f64).sqrt(),
        })
        .collect();
    debug_assert_eq!(n_slices, params.p_cav0.points.len());
    Ok(TlsCavityFit {
        params,
        kappa_ext,
        fit: result,
        bcs_fitted: fit_bcs,
        slices: slice_rms,
    })
}

/// Joint fit of TWPA transmission with shared `λ₀`, `β` and one `P⁰` per
/// temperature. Residuals are absolute transmission differences.
pub fn fit_tls_twpa(points: &[TransmissionPoint], f_ref: Frequency, opts: &SolveOptions) -> Result<TlsTwpaFit, TlsError> {
    let ts: Vec<f64> = points.iter().map(|p| p.t.as_kelvin()).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.p_in.as_watts()).collect();
    let ds: Vec<f64> = points.iter().map(|p| p.delta).collect();
    if ps.iter().any(|v| !(v.is_finite() && *v > 0.0)) || ds.iter().any(|v| !v.is_finite()) {
        return Err(TlsError::InvalidParams("powers must be > 0 and transmissions finite".into()));
    }
    let slices = slices_by_temperature(&ts);
    check_slices(&slices, &ps, "p_twpa0")?;

    let ladders: Vec<(Vec<f64>, Vec<f64>)> = slices.iter().map(|(_, idx)| sorted_slice(idx, &ps, &ds)).collect();
    let t_low = Temperature::kelvin(slices[0].0);
    let depth0 = (1.0 - ladders[0].1[0]).clamp(1e-3, 0.95);
    let lambda0 = (depth0 / tanh_factor(f_ref, t_low)).clamp(1e-3, 0.99);
    let p0_init: Vec<f64> = ladders
        .iter()
        .map(|(p, y)| {
            // δ = 1 − λ/√2 at P = P⁰ for β = 1
            let level = 1.0 - (1.0 - y[0]) / std::f64::consts::SQRT_2;
            interp_log_crossing(p, &y.iter().map(|v| -v).collect::<Vec<_>>(), -level)
                .unwrap_or_else(|| (p[0].ln() * 0.5 + p[p.len() - 1].ln() * 0.5).exp())
        })
        .collect();

    let mut slice_of = vec![0; points.len()];
    for (s, (_, idx)) in slices.iter().enumerate() {
        for &j in idx {
            slice_of[j] = s;
        }
    }
    let tanh_t: Vec<f64> = ts.iter().map(|&t| tanh_factor(f_ref, Temperature::kelvin(t))).collect();
    let residuals = {
        let (ps, ds) = (ps.clone(), ds.clone());
        move |p: &[f64]| -> Vec<f64> {
            (0..ps.len())
                .map(|j| {
                    let p0 = 10f64.powf(p[2 + slice_of[j]]);
                    1.0 - p[0] * tanh_t[j] * twpa_suppression(ps[j], p0, p[1]) - ds[j]
                })
                .collect()
        }
    };
    let mut init = vec![lambda0, 1.0];
    let mut lower = vec![0.0, 0.05];
    let mut upper = vec![1.0 - 1e-9, 10.0];
    let mut names: Vec<String> = vec!["lambda0".into(), "beta".into()];
    for (i, p0) in p0_init.iter().enumerate() {
        init.push(p0.log10());
        lower.push(-30.0);
        upper.push(0.0);
        names.push(format!("log10_p_twpa0[{i}]"));
    }
    let n = init.len();
    let problem = FitProblem::new(residuals, init)
        .with_bounds(lower, upper)
        .with_scales(vec![1.0; n])
        .with_names(names.clone());
    let result = fit::solve(&problem, opts)?;
    check_identifiable(&problem, &result, &names)?;

    let p = &result.params;
    let params = TwpaTlsParams {
        f_ref,
        lambda0: p[0],
        beta: p[1],
        p_twpa0: TempTable::new(slices.iter().enumerate().map(|(i, (t, _))| (*t, 10f64.powf(p[2 + i]))).collect())?,
    };
    let r = problem.residuals_at(p);
    let slice_rms = slices
        .iter()
        .map(|(t, idx)| SliceResidual {
            t_k: *t,
            n_points: idx.len(),
            rms: (idx.iter().map(|&j| r[j] * r[j]).sum::<f64>() / idx.len() as f64).sqrt(),
        })
        .collect();
    Ok(TlsTwpaFit {
        params,
        fit: result,
        slices: slice_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const FC: Frequency = Frequency::hz(5.154e9);

    fn cavity_params() -> TlsLossParams {
        TlsLossParams {
            f_c: FC,
            kappa_tls0: AngularRate::two_pi_hz(660e3),
            p_cav0: TempTable::new(vec![(0.02, 1e-13), (0.15, 3e-13), (0.4, 2e-12)]).unwrap(),
            kappa_dielec0: AngularRate::two_pi_hz(270e3),
            alpha: AngularRate::two_pi_hz(1.5e10),
            t_c: Temperature::kelvin(1.2),
        }
    }

    fn twpa_params() -> TwpaTlsParams {
        TwpaTlsParams {
            f_ref: FC,
            lambda0: 0.4,
            beta: 1.0,
            p_twpa0: TempTable::new(vec![(0.02, 3e-17), (0.4, 3e-16)]).unwrap(),
        }
    }

    #[test]
    fn tanh_limits() {
        assert_relative_eq!(tanh_factor(FC, Temperature::kelvin(1e-4)), 1.0, max_relative = 1e-15);
        let t_star = PLANCK * FC.as_hz() / (2.0 * BOLTZMANN);
        assert_relative_eq!(tanh_factor(FC, Temperature::kelvin(t_star)), 1f64.tanh(), max_relative = 1e-14);
        assert_relative_eq!(1f64.tanh(), 0.7615941559557649, max_relative = 1e-15);
    }

    #[test]
    fn crossover_temperature_of_the_device() {
        // h f_c / k_B with exact SI constants, by hand:
        // 6.62607015e-34 · 5.154e9 / 1.380649e-23 = 0.247352… K
        let oracle = 6.62607015e-34_f64 * 5.154e9 / 1.380649e-23;
        assert!((oracle - 0.247_35).abs() < 1e-4);
        assert_relative_eq!(PLANCK * FC.as_hz() / BOLTZMANN, oracle, max_relative = 1e-15);
    }

    #[test]
    fn kappa_in_limits() {
        let p = cavity_params();
        let t = Temperature::kelvin(0.15);
        let saturated = kappa_in(&p, t, Power::watts(1e6), false).unwrap();
        assert_relative_eq!(
            saturated.as_rad_per_s(),
            kappa_bcs(&p, t).as_rad_per_s(),
            max_relative = 1e-9
        );
        let cold = kappa_in(&p, Temperature::kelvin(1e-3), Power::watts(0.0), true).unwrap();
        assert_relative_eq!(
            cold.as_rad_per_s(),
            p.kappa_tls0.as_rad_per_s() + p.kappa_dielec0.as_rad_per_s(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn kappa_bcs_limits() {
        let mut p = cavity_params();
        assert_relative_eq!(
            kappa_bcs(&p, Temperature::kelvin(0.01)).as_rad_per_s(),
            p.kappa_dielec0.as_rad_per_s(),
            max_relative = 1e-12
        );
        p.alpha = AngularRate::rad_per_s(0.0);
        for t in [0.01, 0.3, 0.55] {
            assert_eq!(kappa_bcs(&p, Temperature::kelvin(t)), p.kappa_dielec0);
        }
    }

    #[test]
    fn out_of_table_needs_extrapolation() {
        let p = cavity_params();
        let t = Temperature::kelvin(0.004);
        assert!(matches!(kappa_in(&p, t, Power::watts(1e-12), false), Err(TlsError::OutOfRange { .. })));
        assert!(kappa_in(&p, t, Power::watts(1e-12), true).is_ok());
    }

    #[test]
    fn log_linear_interpolation() {
        let t = TempTable::new(vec![(0.1, 1e-14), (0.3, 1e-12)]).unwrap();
        assert_relative_eq!(t.log_linear(0.2, false).unwrap(), 1e-13, max_relative = 1e-12);
        assert_relative_eq!(t.linear(0.2, false).unwrap(), 0.5 * (1e-14 + 1e-12), max_relative = 1e-12);
        assert!(TempTable::new(vec![(0.1, 1.0), (0.1, 2.0)]).is_err());
    }

    #[test]
    fn twpa_limits() {
        let p = twpa_params();
        let t = Temperature::kelvin(0.02);
        assert_relative_eq!(twpa_transmission(&p, t, Power::watts(1e3), false).unwrap(), 1.0, max_relative = 1e-8);
        let low = twpa_transmission(&p, t, Power::watts(0.0), false).unwrap();
        assert_relative_eq!(low, 1.0 - p.lambda(t), max_relative = 1e-15);
        assert!((low - 0.6).abs() < 1e-3);
        let at_p0 = twpa_transmission(&p, t, Power::watts(3e-17), false).unwrap();
        assert_relative_eq!(at_p0, 1.0 - p.lambda(t) / 2f64.sqrt(), max_relative = 1e-14);
        assert_eq!(twpa_suppression(2.5, 2.5, 1.0), 1.0 / 2f64.sqrt());
    }

    proptest! {
        #[test]
        fn kappa_in_monotone_in_power(t in 0.02f64..0.4, lp in -18.0f64..-8.0, dlp in 0.01f64..3.0) {
            let p = cavity_params();
            let t = Temperature::kelvin(t);
            let a = kappa_in(&p, t, Power::watts(10f64.powf(lp)), false).unwrap();
            let b = kappa_in(&p, t, Power::watts(10f64.powf(lp + dlp)), false).unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn twpa_monotone(t in 0.02f64..0.3, dt in 0.0f64..0.1, lp in -20.0f64..-12.0, dlp in 0.0f64..3.0) {
            let p = twpa_params();
            let t0 = Temperature::kelvin(t);
            let p0 = Power::watts(10f64.powf(lp));
            let d = twpa_transmission(&p, t0, p0, false).unwrap();
            prop_assert!(d > 0.0 && d <= 1.0);
            let more_p = twpa_transmission(&p, t0, Power::watts(10f64.powf(lp + dlp)), false).unwrap();
            prop_assert!(more_p >= d);
            // λ(T) alone: hold P⁰ fixed by using a single-entry table
            let mut q = p.clone();
            q.p_twpa0 = TempTable::constant(0.1, 1e-16);
            let a = twpa_transmission(&q, t0, p0, true).unwrap();
            let b = twpa_transmission(&q, Temperature::kelvin(t + dt), p0, true).unwrap();
            prop_assert!(b >= a);
        }

        #[test]
        fn tls_term_is_separable(t1 in 0.01f64..0.4, t2 in 0.01f64..0.4, lp1 in -16.0f64..-10.0, lp2 in -16.0f64..-10.0) {
            let mut p = cavity_params();
            p.p_cav0 = TempTable::constant(0.1, 3e-13);
            let f = |t: f64, lp: f64| {
                let t = Temperature::kelvin(t);
                (kappa_in(&p, t, Power::watts(10f64.powf(lp)), true).unwrap() - kappa_bcs(&p, t)).as_rad_per_s()
            };
            // f(t1,p1) f(t2,p2) = f(t1,p2) f(t2,p1)
            let lhs = f(t1, lp1) * f(t2, lp2);
            let rhs = f(t1, lp2) * f(t2, lp1);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs());
        }
    }

    fn cavity_grid(truth: &TlsLossParams, k_ext: f64) -> Vec<KappaPoint> {
        let mut pts = Vec::new();
        for &t in &[0.02, 0.15, 0.4] {
            for i in 0..12 {
                let p = 10f64.powf(-15.0 + 0.5 * i as f64);
                let t = Temperature::kelvin(t);
                let k = AngularRate::two_pi_hz(k_ext) + kappa_in(truth, t, Power::watts(p), false).unwrap();
                pts.push(KappaPoint { t, p_in: Power::watts(p), kappa_tot: k });
            }
        }
        pts
    }

    #[test]
    fn cavity_fit_noiseless_round_trip() {
        let truth = cavity_params();
        // needs two slices ≥ 200 mK for the BCS term; add one
        let mut truth = truth;
        truth.p_cav0 = TempTable::new(vec![(0.02, 1e-13), (0.15, 3e-13), (0.3, 8e-13), (0.4, 2e-12)]).unwrap();
        let mut pts = cavity_grid(&truth, 180e3);
        for i in 0..12 {
            let p = 10f64.powf(-15.0 + 0.5 * i as f64);
            let t = Temperature::kelvin(0.3);
            let k = AngularRate::two_pi_hz(180e3) + kappa_in(&truth, t, Power::watts(p), false).unwrap();
            pts.push(KappaPoint { t, p_in: Power::watts(p), kappa_tot: k });
        }
        let fit = fit_tls_cavity(&pts, AngularRate::two_pi_hz(180e3), FC, &TlsFitOptions::default()).unwrap();
        assert!(fit.bcs_fitted);
        let got = &fit.params;
        assert_relative_eq!(got.kappa_tls0.as_hz(), truth.kappa_tls0.as_hz(), max_relative = 1e-6);
        assert_relative_eq!(got.kappa_dielec0.as_hz(), truth.kappa_dielec0.as_hz(), max_relative = 1e-6);
        assert_relative_eq!(got.alpha.as_hz(), truth.alpha.as_hz(), max_relative = 1e-6);
        assert_relative_eq!(got.t_c.as_kelvin(), truth.t_c.as_kelvin(), max_relative = 1e-6);
        for (a, b) in got.p_cav0.points.iter().zip(&truth.p_cav0.points) {
            assert_relative_eq!(a.1, b.1, max_relative = 1e-6);
        }
    }

    #[test]
    fn cavity_fit_inflection_at_critical_power() {
        let truth = cavity_params();
        let fit = fit_tls_cavity(&cavity_grid(&truth, 180e3), AngularRate::two_pi_hz(180e3), FC, &TlsFitOptions::default())
            .unwrap();
        let t = Temperature::kelvin(0.15);
        let p0 = fit.params.p_cav0_at(t, false).unwrap().as_watts();
        // second derivative of κ_in in ln P changes sign at the inflection
        let step = 0.01;
        let k = |u: f64| kappa_in(&fit.params, t, Power::watts(u.exp()), false).unwrap().as_rad_per_s();
        let us: Vec<f64> = (0..2000).map(|i| (1e-16f64).ln() + step * i as f64).collect();
        let curv: Vec<f64> = us.iter().map(|&u| k(u + step) - 2.0 * k(u) + k(u - step)).collect();
        let i = curv.windows(2).position(|w| w[0].signum() != w[1].signum()).unwrap();
        assert!((us[i] - p0.ln()).abs() <= 2.0 * step);
    }

    #[test]
    fn constant_power_slice_is_unidentifiable() {
        let pts: Vec<KappaPoint> = (0..6)
            .map(|_| KappaPoint {
                t: Temperature::kelvin(0.02),
                p_in: Power::watts(1e-12),
                kappa_tot: AngularRate::two_pi_hz(600e3),
            })
            .collect();
        match fit_tls_cavity(&pts, AngularRate::two_pi_hz(180e3), FC, &TlsFitOptions::default()) {
            Err(TlsError::Unidentifiable { parameter }) => assert!(parameter.contains("p_cav0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_points_per_slice() {
        let truth = cavity_params();
        let pts: Vec<KappaPoint> = cavity_grid(&truth, 180e3).into_iter().take(4).collect();
        assert!(matches!(
            fit_tls_cavity(&pts, AngularRate::two_pi_hz(180e3), FC, &TlsFitOptions::default()),
            Err(TlsError::InsufficientData(_))
        ));
    }

    #[test]
    fn twpa_fit_noiseless_round_trip() {
        let truth = TwpaTlsParams {
            f_ref: FC,
            lambda0: 0.4,
            beta: 0.9,
            p_twpa0: TempTable::new(vec![(0.02, 3e-17), (0.15, 5e-17), (0.3, 1.2e-16)]).unwrap(),
        };
        let mut pts = Vec::new();
        for &(t, _) in &truth.p_twpa0.points {
            for i in 0..25 {
                let p = 10f64.powf(-20.0 + 0.3 * i as f64);
                let t = Temperature::kelvin(t);
                let d = twpa_transmission(&truth, t, Power::watts(p), false).unwrap();
                pts.push(TransmissionPoint { t, p_in: Power::watts(p), delta: d });
            }
        }
        let fit = fit_tls_twpa(&pts, FC, &SolveOptions::default()).unwrap();
        assert_relative_eq!(fit.params.lambda0, 0.4, max_relative = 1e-6);
        assert_relative_eq!(fit.params.beta, 0.9, max_relative = 1e-6);
        for (a, b) in fit.params.p_twpa0.points.iter().zip(&truth.p_twpa0.points) {
            assert_relative_eq!(a.1, b.1, max_relative = 1e-6);
        }
    }
}
