//! Sideband peak integration: Lorentzian-plus-baseline fit with a direct
//! numerical cross-check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{self, FitError, FitProblem, FitResult, SolveOptions};

#[derive(Debug, Error)]
pub enum PeakError {
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("spectrum spans {span_hz:.4e} Hz, fewer than {needed} linewidths of {fwhm_hz:.4e} Hz")]
    InsufficientSpan { span_hz: f64, fwhm_hz: f64, needed: f64 },
    #[error("no peak found: {0}")]
    Absent(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Power spectral density on a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq_hz: Vec<f64>,
    pub psd: Vec<f64>,
}

impl Spectrum {
    pub fn new(freq_hz: Vec<f64>, psd: Vec<f64>) -> Result<Self, PeakError> {
        let s = Self { freq_hz, psd };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PeakError> {
        if self.freq_hz.len() != self.psd.len() {
            return Err(PeakError::InvalidSpectrum(format!(
                "{} frequencies vs {} PSD values",
                self.freq_hz.len(),
                self.psd.len()
            )));
        }
        if self.freq_hz.len() < 16 {
            return Err(PeakError::InvalidSpectrum(format!("{} points, need at least 16", self.freq_hz.len())));
        }
        if self.freq_hz.iter().chain(&self.psd).any(|v| !v.is_finite()) {
            return Err(PeakError::InvalidSpectrum("non-finite value".into()));
        }
        if self.freq_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PeakError::InvalidSpectrum("frequencies must increase strictly".into()));
        }
        Ok(())
    }

    pub fn span_hz(&self) -> f64 {
        self.freq_hz[self.freq_hz.len() - 1] - self.freq_hz[0]
    }

    /// Trapezoidal integral of `psd − baseline(f)`.
    pub fn trapezoid(&self, baseline: impl Fn(f64) -> f64) -> f64 {
        self.freq_hz
            .windows(2)
            .zip(self.psd.windows(2))
            .map(|(f, y)| 0.5 * (f[1] - f[0]) * (y[0] - baseline(f[0]) + y[1] - baseline(f[1])))
            .sum()
    }
}

/// Lorentzian of total area `area` and full width `fwhm` centered on `center`.
pub fn lorentzian(f: f64, center: f64, fwhm: f64, area: f64) -> f64 {
    let h = 0.5 * fwhm;
    area / std::f64::consts::PI * h / ((f - center).powi(2) + h * h)
}

/// Partial derivatives of [`lorentzian`] with respect to (center, fwhm, area).
pub fn lorentzian_partials(f: f64, center: f64, fwhm: f64, area: f64) -> [f64; 3] {
    let h = 0.5 * fwhm;
    let d = f - center;
    let den = d * d + h * h;
    let pi = std::f64::consts::PI;
    [
        area / pi * h * 2.0 * d / (den * den),
        0.5 * area / pi * (d * d - h * h) / (den * den),
        h / (pi * den),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakOptions {
    pub baseline: BaselinePolicy,
    pub min_linewidths: f64,
    pub snr_threshold: f64,
    /// Allowed relative mismatch between fitted and trapezoid areas.
    pub cross_check_tolerance: f64,
    pub solve: SolveOptions,
}

impl Default for PeakOptions {
    fn default() -> Self {
        Self {
            baseline: BaselinePolicy::Constant,
            min_linewidths: 10.0,
            snr_threshold: 3.0,
            cross_check_tolerance: 0.02,
            solve: SolveOptions::default(),
        }
    }
}

/// Fitted sideband peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandPeak {
    pub center_hz: f64,
    /// Full width at half maximum, i.e. `Γ_eff/2π`.
    pub fwhm_hz: f64,
    /// `π · height · HWHM`, PSD units × Hz.
    pub area: f64,
    pub baseline: f64,
    pub baseline_slope: f64,
    pub center_sigma_hz: f64,
    pub fwhm_sigma_hz: f64,
    pub area_sigma: f64,
    /// Peak height over the rms fit residual.
    pub snr: f64,
    pub low_confidence: bool,
    /// Trapezoid of the data minus the fitted baseline.
    pub trapezoid_area: f64,
    pub methods_agree: bool,
    pub fit: FitResult,
}

impl SidebandPeak {
    pub fn height(&self) -> f64 {
        self.area / (std::f64::consts::PI * 0.5 * self.fwhm_hz)
    }
}

struct PeakGuess {
    center: f64,
    fwhm: f64,
    area: f64,
    baseline: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn initial_guess(s: &Spectrum) -> Result<PeakGuess, PeakError> {
    let n = s.psd.len();
    let edge = (n / 10).max(3);
    let mut edges: Vec<f64> = s.psd[..edge].iter().chain(&s.psd[n - edge..]).copied().collect();
    let baseline = median(&mut edges);
    let (imax, &ymax) = s
        .psd
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let height = ymax - baseline;
    if !(height > 0.0) {
        return Err(PeakError::Absent("maximum does not rise above the edge baseline".into()));
    }
    let half = baseline + 0.5 * height;
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = imax;
        for i in range {
            if s.psd[i] < half {
                let (f0, f1, y0, y1) = (s.freq_hz[prev], s.freq_hz[i], s.psd[prev], s.psd[i]);
                return Some(f0 + (half - y0) * (f1 - f0) / (y1 - y0));
            }
            prev = i;
        }
        None
    };
    let left = cross(&mut (0..imax).rev());
    let right = cross(&mut (imax + 1..n));
    let fwhm = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (s.freq_hz[imax] - l),
        (None, Some(r)) => 2.0 * (r - s.freq_hz[imax]),
        (None, None) => return Err(PeakError::Absent("no half-maximum crossing".into())),
    };
    let bin = s.span_hz() / (n - 1) as f64;
    let fwhm = fwhm.max(bin);
    Ok(PeakGuess {
        center: s.freq_hz[imax],
        fwhm,
        area: std::f64::consts::PI * height * 0.5 * fwhm,
        baseline,
    })
}

/// Fit a Lorentzian plus baseline and integrate it.
pub fn integrate_peak(spectrum: &Spectrum, opts: &PeakOptions) -> Result<SidebandPeak, PeakError> {
    spectrum.validate()?;
    let g = initial_guess(spectrum)?;
    let span = spectrum.span_hz();
    if span < opts.min_linewidths * g.fwhm {
        return Err(PeakError::InsufficientSpan {
            span_hz: span,
            fwhm_hz: g.fwhm,
            needed: opts.min_linewidths,
        });
    }
    let f_ref = g.center;
    let x: Vec<f64> = spectrum.freq_hz.iter().map(|f| f - f_ref).collect();
    let y = spectrum.psd.clone();
    let linear = opts.baseline == BaselinePolicy::Linear;
    let bin = span / (x.len() - 1) as f64;

    let model = move |xi: f64, p: &[f64]| -> f64 {
        let slope = if linear { p[4] } else { 0.0 };
        lorentzian(xi, p[0], p[1], p[2]) + p[3] + slope * xi
    };
    let residuals = {
        let (x, y) = (x.clone(), y.clone());
        move |p: &[f64]| -> Vec<f64> { x.iter().zip(&y).map(|(&xi, &yi)| model(xi, p) - yi).collect() }
    };
    let jacobian = {
        let x = x.clone();
        move |p: &[f64]| -> DMatrix<f64> {
            let ncol = if linear { 5 } else { 4 };
            DMatrix::from_fn(x.len(), ncol, |i, j| match j {
                0..=2 => lorentzian_partials(x[i], p[0], p[1], p[2])[j],
                3 => 1.0,
                _ => x[i],
            })
        }
    };
    let ypp = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut init = vec![0.0, g.fwhm, g.area, g.baseline];
    let mut lower = vec![-0.5 * span, 0.1 * bin, 0.0, f64::NEG_INFINITY];
    let mut upper = vec![0.5 * span, span, f64::INFINITY, f64::INFINITY];
    let mut scales = vec![g.fwhm, g.fwhm, g.area.max(f64::MIN_POSITIVE), ypp];
    let mut names = vec!["center_offset_hz", "fwhm_hz", "area", "baseline"];
    if linear {
        init.push(0.0);
        lower.push(f64::NEG_INFINITY);
        upper.push(f64::INFINITY);
        scales.push(ypp / span);
        names.push("baseline_slope");
    }
    let problem = FitProblem::new(residuals, init)
        .with_bounds(lower, upper)
        .with_scales(scales)
        .with_names(names)
        .with_jacobian(jacobian);
    let result = fit::solve(&problem, &opts.solve)?;
    if result.status == fit::FitStatus::MaxIter {
        return Err(PeakError::Fit(FitError::NotConverged { best: Box::new(result) }));
    }
    let p = result.params.clone();
    if !(p[2] > 0.0) {
        return Err(PeakError::Absent("fitted area is not positive".into()));
    }
    let (center, fwhm, area, b0) = (f_ref + p[0], p[1], p[2], p[3]);
    let slope = if linear { p[4] } else { 0.0 };
    let rms = result.residual_norm / (x.len() as f64).sqrt();
    let height = area / (std::f64::consts::PI * 0.5 * fwhm);
    let snr = if rms > 0.0 { height / rms } else { f64::INFINITY };
    let trapezoid_area = spectrum.trapezoid(|f| b0 + slope * (f - f_ref));
    let methods_agree = (trapezoid_area / area - 1.0).abs() <= opts.cross_check_tolerance;
    let sig = result.sigmas().unwrap_or_else(|| vec![f64::NAN; p.len()]);
    Ok(SidebandPeak {
        center_hz: center,
        fwhm_hz: fwhm,
        area,
        baseline: b0,
        baseline_slope: slope,
        center_sigma_hz: sig[0],
        fwhm_sigma_hz: sig[1],
        area_sigma: sig[2],
        snr,
        low_confidence: snr < opts.snr_threshold,
        trapezoid_area,
        methods_agree,
        fit: result,
    })
}
