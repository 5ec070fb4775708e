//! Reflection line shape of a one-port cavity and its magnitude-only fit.
//!
//! The reflected amplitude is
//!
//! ```text
//! S11(ω) = [(Q_ext − 2Q_tot)/Q_ext + 2i·Q_tot·(ω − ω_c)/ω_c] / [1 + 2i·Q_tot·(ω − ω_c)/ω_c]
//! ```
//!
//! Its modulus only depends on `(κ_ext − κ_in)²`, so a magnitude fit returns
//! two parameter sets (over- and undercoupled) with identical residuals. The
//! choice between them is left to the calibration pipeline.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{self, FitError, FitProblem, FitResult, SolveOptions};
use crate::units::{AngularRate, Frequency};

/// Default floor for `s11_db` at exact critical coupling.
pub const DEFAULT_DB_FLOOR: f64 = -200.0;

#[derive(Debug, Error)]
pub enum CavityError {
    #[error("invalid cavity parameters: {0}")]
    InvalidParams(String),
    #[error("invalid reflection trace: {0}")]
    InvalidTrace(String),
    #[error("trace spans {span_hz:.3e} Hz but the linewidth is {linewidth_hz:.3e} Hz (need 3 linewidths)")]
    InsufficientSpan { span_hz: f64, linewidth_hz: f64 },
    #[error("reflection fit failed: {0}")]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingBranch {
    Overcoupled,
    Undercoupled,
}

impl CouplingBranch {
    pub fn other(self) -> Self {
        match self {
            Self::Overcoupled => Self::Undercoupled,
            Self::Undercoupled => Self::Overcoupled,
        }
    }
}

/// Resonance frequency and damping-rate decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub f_c: Frequency,
    pub kappa_ext: AngularRate,
    pub kappa_in: AngularRate,
}

impl CavityParams {
    pub fn new(f_c: Frequency, kappa_ext: AngularRate, kappa_in: AngularRate) -> Result<Self, CavityError> {
        let p = Self { f_c, kappa_ext, kappa_in };
        p.validate()?;
        Ok(p)
    }

    /// Device quoted in §-style `2π·value` form: `f_c` in Hz, rates in Hz.
    pub fn from_hz(f_c_hz: f64, kappa_ext_hz: f64, kappa_in_hz: f64) -> Result<Self, CavityError> {
        Self::new(
            Frequency::hz(f_c_hz),
            AngularRate::two_pi_hz(kappa_ext_hz),
            AngularRate::two_pi_hz(kappa_in_hz),
        )
    }

    pub fn validate(&self) -> Result<(), CavityError> {
        let f = self.f_c.as_hz();
        let ke = self.kappa_ext.as_rad_per_s();
        let ki = self.kappa_in.as_rad_per_s();
        if !(f.is_finite() && f > 0.0) {
            return Err(CavityError::InvalidParams(format!("f_c = {f} Hz")));
        }
        if !(ke.is_finite() && ke > 0.0) {
            return Err(CavityError::InvalidParams(format!("kappa_ext = {ke} rad/s must be > 0")));
        }
        if !(ki.is_finite() && ki >= 0.0) {
            return Err(CavityError::InvalidParams(format!("kappa_in = {ki} rad/s must be >= 0")));
        }
        Ok(())
    }

    pub fn kappa_tot(&self) -> AngularRate {
        self.kappa_ext + self.kappa_in
    }

    pub fn omega_c(&self) -> AngularRate {
        self.f_c.to_angular()
    }

    pub fn q_ext(&self) -> f64 {
        self.omega_c().as_rad_per_s() / self.kappa_ext.as_rad_per_s()
    }

    pub fn q_in(&self) -> f64 {
        self.omega_c().as_rad_per_s() / self.kappa_in.as_rad_per_s()
    }

    pub fn q_tot(&self) -> f64 {
        1.0 / (1.0 / self.q_ext() + 1.0 / self.q_in())
    }

    pub fn branch(&self) -> CouplingBranch {
        if self.kappa_ext > self.kappa_in {
            CouplingBranch::Overcoupled
        } else {
            CouplingBranch::Undercoupled
        }
    }

    /// Exchange `κ_ext` and `κ_in` at fixed `κ_tot`.
    pub fn swapped(&self) -> Self {
        Self {
            f_c: self.f_c,
            kappa_ext: self.kappa_in,
            kappa_in: self.kappa_ext,
        }
    }

    /// Sideband-resolved regime check: `Ω_m > κ_tot`.
    pub fn is_sideband_resolved(&self, omega_m: AngularRate) -> bool {
        omega_m > self.kappa_tot()
    }
}

/// Complex reflection coefficient in quality-factor form.
pub fn s11_complex(params: &CavityParams, f: Frequency) -> Complex<f64> {
    let q_ext = params.q_ext();
    let q_tot = 1.0 / (1.0 / q_ext + params.kappa_in.as_rad_per_s() / params.omega_c().as_rad_per_s());
    let x = (f.as_hz() - params.f_c.as_hz()) / params.f_c.as_hz();
    let num = Complex::new((q_ext - 2.0 * q_tot) / q_ext, 2.0 * q_tot * x);
    let den = Complex::new(1.0, 2.0 * q_tot * x);
    num / den
}

/// A dB value that may have been clamped to the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbValue {
    pub db: f64,
    /// Set when the exact value was below the floor (critical coupling on resonance).
    pub floored: bool,
}

/// `20·log10|S11|` with a configurable floor.
pub fn s11_db_floored(params: &CavityParams, f: Frequency, floor_db: f64) -> DbValue {
    let db = 20.0 * s11_complex(params, f).norm().log10();
    if db.is_nan() || db < floor_db {
        DbValue { db: floor_db, floored: true }
    } else {
        DbValue { db, floored: false }
    }
}

/// `20·log10|S11|`, clamped at [`DEFAULT_DB_FLOOR`].
pub fn s11_db(params: &CavityParams, f: Frequency) -> f64 {
    s11_db_floored(params, f, DEFAULT_DB_FLOOR).db
}

/// `|S11|²` written with the contrast `c = (κ_in − κ_ext)/κ_tot` and `κ_tot`
/// in Hz. Only `c²` enters.
fn power_reflectance(detuning_hz: f64, kappa_tot_hz: f64, contrast: f64) -> f64 {
    let h2 = 0.25 * kappa_tot_hz * kappa_tot_hz;
    let d2 = detuning_hz * detuning_hz;
    (contrast * contrast * h2 + d2) / (h2 + d2)
}

/// A magnitude sweep across the cavity resonance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTrace {
    pub freq_hz: Vec<f64>,
    pub mag_db: Vec<f64>,
}

impl ReflectionTrace {
    pub fn new(freq_hz: Vec<f64>, mag_db: Vec<f64>) -> Result<Self, CavityError> {
        let t = Self { freq_hz, mag_db };
        t.validate()?;
        Ok(t)
    }

    /// Complex samples are reduced to magnitude.
    pub fn from_complex(freq_hz: Vec<f64>, re: &[f64], im: &[f64]) -> Result<Self, CavityError> {
        if re.len() != freq_hz.len() || im.len() != freq_hz.len() {
            return Err(CavityError::InvalidTrace("re/im columns do not match the frequency column".into()));
        }
        let mag_db = re.iter().zip(im).map(|(a, b)| 10.0 * (a * a + b * b).log10()).collect();
        Self::new(freq_hz, mag_db)
    }

    pub fn len(&self) -> usize {
        self.freq_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_hz.is_empty()
    }

    pub fn span_hz(&self) -> f64 {
        self.freq_hz.last().copied().unwrap_or(0.0) - self.freq_hz.first().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), CavityError> {
        if self.freq_hz.len() != self.mag_db.len() {
            return Err(CavityError::InvalidTrace("frequency and magnitude columns differ in length".into()));
        }
        if self.freq_hz.len() < 8 {
            return Err(CavityError::InvalidTrace(format!("{} points, need at least 8", self.freq_hz.len())));
        }
        if let Some(i) = self.freq_hz.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CavityError::InvalidTrace(format!("frequencies not strictly increasing at index {}", i + 1)));
        }
        if self.freq_hz.iter().chain(&self.mag_db).any(|v| !v.is_finite()) {
            return Err(CavityError::InvalidTrace("non-finite sample".into()));
        }
        Ok(())
    }

    /// Generate a noiseless trace from a model.
    pub fn from_model(params: &CavityParams, freq_hz: Vec<f64>) -> Result<Self, CavityError> {
        let mag_db = freq_hz.iter().map(|&f| s11_db(params, Frequency::hz(f))).collect();
        Self::new(freq_hz, mag_db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResidualSpace {
    /// Residuals in dB, uniform weights.
    #[default]
    Db,
    /// Residuals in linear magnitude `|S11|`.
    LinearMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectionFitOptions {
    pub residuals: ResidualSpace,
    pub solve: SolveOptions,
}

impl Default for ReflectionFitOptions {
    fn default() -> Self {
        Self {
            residuals: ResidualSpace::Db,
            solve: SolveOptions::default(),
        }
    }
}

/// Result of a reflection fit: the raw solver result over
/// `[f_c − f_ref (Hz), κ_tot/2π (Hz), |c|]` plus both coupling solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionFit {
    pub fit: FitResult,
    pub f_ref_hz: f64,
    pub overcoupled: CavityParams,
    pub undercoupled: CavityParams,
}

impl ReflectionFit {
    pub fn params(&self, branch: CouplingBranch) -> CavityParams {
        match branch {
            CouplingBranch::Overcoupled => self.overcoupled,
            CouplingBranch::Undercoupled => self.undercoupled,
        }
    }

    pub fn f_c(&self) -> Frequency {
        self.overcoupled.f_c
    }

    pub fn kappa_tot(&self) -> AngularRate {
        self.overcoupled.kappa_tot()
    }

    /// 1σ of `κ_tot/2π` in Hz.
    pub fn kappa_tot_sigma_hz(&self) -> f64 {
        self.fit.sigma(1)
    }

    /// 1σ of `κ_ext/2π` (Hz) on the given branch.
    pub fn kappa_ext_sigma_hz(&self, branch: CouplingBranch) -> f64 {
        let Some(cov) = &self.fit.covariance else {
            return f64::NAN;
        };
        let k = self.fit.params[1];
        let c = self.fit.params[2];
        let sign = match branch {
            CouplingBranch::Overcoupled => 1.0,
            CouplingBranch::Undercoupled => -1.0,
        };
        // κ_ext = κ_tot (1 ± c) / 2
        let g = [0.5 * (1.0 + sign * c), 0.5 * sign * k];
        let idx = [1usize, 2usize];
        let mut var = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                var += g[a] * g[b] * cov[idx[a]][idx[b]];
            }
        }
        var.max(0.0).sqrt()
    }
}

struct InitialGuess {
    f_c_hz: f64,
    kappa_tot_hz: f64,
    contrast: f64,
}

fn self_initialize(trace: &ReflectionTrace) -> InitialGuess {
    let (imin, &min_db) = trace
        .mag_db
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("validated trace is non-empty");
    let f_c_hz = trace.freq_hz[imin];
    // full width at half depth of |S11|²
    let min_pow = 10f64.powf(min_db / 10.0).min(1.0);
    let half = 0.5 * (1.0 + min_pow);
    let pow = |i: usize| 10f64.powf(trace.mag_db[i] / 10.0);
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = imin;
        for i in range {
            if pow(i) >= half {
                let (p0, p1) = (pow(prev), pow(i));
                let t = if p1 != p0 { (half - p0) / (p1 - p0) } else { 0.0 };
                return Some(trace.freq_hz[prev] + t * (trace.freq_hz[i] - trace.freq_hz[prev]));
            }
            prev = i;
        }
        None
    };
    let left = crossing(&mut (0..imin).rev());
    let right = crossing(&mut (imin + 1..trace.len()));
    let kappa_tot_hz = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (f_c_hz - l),
        (None, Some(r)) => 2.0 * (r - f_c_hz),
        (None, None) => trace.span_hz(),
    };
    InitialGuess {
        f_c_hz,
        kappa_tot_hz: kappa_tot_hz.max(trace.span_hz() / trace.len() as f64),
        contrast: 10f64.powf(min_db / 20.0).clamp(1e-3, 0.999),
    }
}

fn pair_from(f_c_hz: f64, kappa_tot_hz: f64, contrast: f64) -> Result<(CavityParams, CavityParams), CavityError> {
    let big = 0.5 * kappa_tot_hz * (1.0 + contrast);
    let small = 0.5 * kappa_tot_hz * (1.0 - contrast);
    let over = CavityParams::from_hz(f_c_hz, big, small)?;
    let under = if small > 0.0 {
        CavityParams::from_hz(f_c_hz, small, big)?
    } else {
        // full contrast leaves no undercoupled partner with κ_ext > 0
        CavityParams::from_hz(f_c_hz, f64::MIN_POSITIVE, big)?
    };
    Ok((over, under))
}

/// Fit the reflection magnitude and return both coupling solutions.
///
/// Without `init`, the resonance is taken at the deepest point, `κ_tot` from
/// the full width at half depth of `|S11|²` and the contrast from the dip
/// depth.
pub fn fit_reflection(
    trace: &ReflectionTrace,
    init: Option<&CavityParams>,
    opts: &ReflectionFitOptions,
) -> Result<ReflectionFit, CavityError> {
    trace.validate()?;
    let guess = match init {
        Some(p) => {
            p.validate()?;
            let k = p.kappa_tot().as_hz();
            InitialGuess {
                f_c_hz: p.f_c.as_hz(),
                kappa_tot_hz: k,
                contrast: ((p.kappa_in.as_hz() - p.kappa_ext.as_hz()).abs() / k).clamp(1e-3, 0.999),
            }
        }
        None => self_initialize(trace),
    };
    let span = trace.span_hz();
    if span < 3.0 * guess.kappa_tot_hz {
        return Err(CavityError::InsufficientSpan {
            span_hz: span,
            linewidth_hz: guess.kappa_tot_hz,
        });
    }

    let f_ref = guess.f_c_hz;
    let detuning: Vec<f64> = trace.freq_hz.iter().map(|f| f - f_ref).collect();
    let data = trace.mag_db.clone();
    let space = opts.residuals;
    let floor_pow = 10f64.powf(DEFAULT_DB_FLOOR / 10.0);
    let residuals = move |p: &[f64]| -> Vec<f64> {
        detuning
            .iter()
            .zip(&data)
            .map(|(&d, &y)| {
                let r2 = power_reflectance(d - p[0], p[1], p[2]).max(floor_pow);
                match space {
                    ResidualSpace::Db => 10.0 * r2.log10() - y,
                    ResidualSpace::LinearMagnitude => r2.sqrt() - 10f64.powf(y / 20.0),
                }
            })
            .collect()
    };
    let k0 = guess.kappa_tot_hz;
    let problem = FitProblem::new(residuals, vec![0.0, k0, guess.contrast])
        .with_bounds(vec![-span, k0 * 1e-3, 0.0], vec![span, span, 1.0])
        .with_scales(vec![k0, k0, 1.0])
        .with_names(["f_c_offset_hz", "kappa_tot_hz", "contrast"]);
    let result = fit::solve(&problem, &opts.solve)?;
    if result.status == fit::FitStatus::MaxIter {
        return Err(CavityError::Fit(FitError::NotConverged { best: Box::new(result) }));
    }
    let (f_off, k, c) = (result.params[0], result.params[1], result.params[2]);
    if span < 3.0 * k {
        return Err(CavityError::InsufficientSpan {
            span_hz: span,
            linewidth_hz: k,
        });
    }
    let (overcoupled, undercoupled) = pair_from(f_ref + f_off, k, c)?;
    Ok(ReflectionFit {
        fit: result,
        f_ref_hz: f_ref,
        overcoupled,
        undercoupled,
    })
}

/// Sum of squared dB residuals of `params` against `trace`.
pub fn trace_ssr(params: &CavityParams, trace: &ReflectionTrace) -> f64 {
    trace
        .freq_hz
        .iter()
        .zip(&trace.mag_db)
        .map(|(&f, &y)| (s11_db(params, Frequency::hz(f)) - y).powi(2))
        .sum()
}

/// Evenly spaced frequencies `f_c ± half_span`.
pub fn linear_grid(center_hz: f64, half_span_hz: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|i| center_hz - half_span_hz + 2.0 * half_span_hz * i as f64 / (n - 1) as f64)
        .collect()
}
