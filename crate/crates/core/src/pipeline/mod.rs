//! End-to-end calibration: sweeps → κ(T, P) → TLS fits → sideband peaks →
//! `g₀` → phonon areas → branch choice → uncertainty.

pub mod budget;
pub mod g0;
pub mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cavity::{fit_reflection, trace_ssr, CouplingBranch, ReflectionFit, ReflectionFitOptions, ReflectionTrace};
use crate::dataset::{Dataset, RunData, RunFlag, RunKind, RunRecord, TwpaPump};
use crate::fit::{FitError, McSummary};
use crate::optomech::{self, OptomechParams, PhononArea, PhononAreaOptions, PumpScheme, TwpaCorrection};
use crate::peak::{integrate_peak, PeakOptions, SidebandPeak};
use crate::tls::{self, KappaPoint, TlsCavityFit, TlsFitOptions, TlsTwpaFit, TransmissionPoint, TwpaTlsParams};
use crate::units::{AngularRate, Frequency, Power, ReferencePlane, Temperature};

use budget::{ErrorBudget, PhononInputs};
use g0::{G0Context, G0Estimate, KappaCorrection, RampPoint};
use report::*;
pub use report::{CalibrationReport, Stage};

pub const DEFAULT_SEED: u64 = 0x5eed_0ca1;
pub const DEFAULT_MC_SAMPLES: usize = 2000;

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub seed: u64,
    pub twpa_correction: bool,
    pub asymmetry: bool,
    /// Monte-Carlo samples per run; 0 skips propagation.
    pub mc_samples: usize,
    pub budget: ErrorBudget,
    /// Runs at or above this temperature decide the coupling branch.
    pub high_t_min_k: f64,
    /// Candidates whose high-T ratios differ by less than this are ambiguous.
    pub ambiguity_threshold: f64,
    /// Runs at or above this temperature enter the scatter estimate.
    pub scatter_min_k: f64,
    pub extrapolate: bool,
    pub stop_after: Option<Stage>,
    pub reflection: ReflectionFitOptions,
    pub tls: TlsFitOptions,
    pub peak: PeakOptions,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            twpa_correction: true,
            asymmetry: false,
            mc_samples: DEFAULT_MC_SAMPLES,
            budget: ErrorBudget::default(),
            high_t_min_k: 0.2,
            ambiguity_threshold: 0.10,
            scatter_min_k: 0.01,
            extrapolate: false,
            stop_after: None,
            reflection: ReflectionFitOptions::default(),
            tls: TlsFitOptions::default(),
            peak: PeakOptions::default(),
        }
    }
}

/// Temperatures closer than 1 nK are the same setpoint.
fn t_key(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn hz(r: AngularRate) -> f64 {
    r.as_hz()
}

fn run_seed(seed: u64, salt: u64, i: usize) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

struct Sweep<'a> {
    run: &'a RunRecord,
    trace: &'a ReflectionTrace,
    fit: ReflectionFit,
}

struct Peak<'a> {
    run: &'a RunRecord,
    scheme: PumpScheme,
    peak: SidebandPeak,
}

struct BranchRun {
    peak: usize,
    area: PhononArea,
    expected: f64,
}

struct BranchWork {
    branch: CouplingBranch,
    tls: TlsCavityFit,
    g0: Option<(f64, G0Estimate)>,
    runs: Vec<BranchRun>,
    notices: Vec<Notice>,
}

struct Run<'d> {
    ds: &'d Dataset,
    cfg: &'d CalibrationConfig,
    report: CalibrationReport,
}

type StageResult<T> = Result<T, String>;

impl<'d> Run<'d> {
    fn notice(&mut self, stage: Stage, run_id: Option<&str>, message: impl Into<String>) {
        self.report.notices.push(Notice {
            stage,
            run_id: run_id.map(str::to_owned),
            message: message.into(),
        });
    }

    fn validate(&mut self) -> StageResult<()> {
        let sweeps: Vec<&RunRecord> = self.ds.runs_of(RunKind::ReflectionSweep).collect();
        if sweeps.is_empty() {
            return Err("no reflection_sweep runs".into());
        }
        let mut temps: Vec<i64> = sweeps.iter().map(|r| t_key(r.t_cryo.as_kelvin())).collect();
        temps.sort();
        temps.dedup();
        if temps.len() < 2 {
            return Err("reflection_sweep runs cover a single temperature; the TLS fit needs at least 2".into());
        }
        if self.ds.runs_of(RunKind::SidebandSpectrum).next().is_none() {
            return Err("no sideband_spectrum runs".into());
        }
        for w in &self.ds.warnings {
            self.report.notices.push(Notice {
                stage: Stage::Validate,
                run_id: None,
                message: w.clone(),
            });
        }
        Ok(())
    }

    fn cavity(&mut self) -> StageResult<Vec<Sweep<'d>>> {
        let runs: Vec<&'d RunRecord> = self.ds.runs_of(RunKind::ReflectionSweep).collect();
        let opts = self.cfg.reflection;
        let fits: Vec<_> = runs
            .par_iter()
            .map(|r| match &r.data {
                RunData::Sweep(tr) => fit_reflection(tr, None, &opts).map(|f| (tr, f)).map_err(|e| e.to_string()),
                _ => Err("not a sweep".to_string()),
            })
            .collect();
        let mut out = Vec::new();
        for (run, res) in runs.into_iter().zip(fits) {
            match res {
                Ok((trace, fit)) => {
                    if fit.fit.is_advisory() {
                        self.notice(Stage::Cavity, Some(&run.id), "reflection fit is advisory");
                    }
                    out.push(Sweep { run, trace, fit });
                }
                Err(e) => self.notice(Stage::Cavity, Some(&run.id), format!("excluded: {e}")),
            }
        }
        if out.is_empty() {
            return Err("every reflection fit failed".into());
        }
        self.report.cavity = out
            .iter()
            .map(|s| {
                let (o, u) = (CouplingBranch::Overcoupled, CouplingBranch::Undercoupled);
                SweepResult {
                    run_id: s.run.id.clone(),
                    t_k: s.run.t_cryo.as_kelvin(),
                    p_in_w: s.run.p_in.map_or(f64::NAN, |p| p.as_watts()),
                    f_c_hz: Estimate::new(s.fit.f_c().as_hz(), s.fit.fit.sigma(0)),
                    kappa_tot_hz: Estimate::new(hz(s.fit.kappa_tot()), s.fit.kappa_tot_sigma_hz()),
                    kappa_ext_overcoupled_hz: Estimate::new(hz(s.fit.params(o).kappa_ext), s.fit.kappa_ext_sigma_hz(o)),
                    kappa_ext_undercoupled_hz: Estimate::new(hz(s.fit.params(u).kappa_ext), s.fit.kappa_ext_sigma_hz(u)),
                    ssr_overcoupled: trace_ssr(&s.fit.params(o), s.trace),
                    ssr_undercoupled: trace_ssr(&s.fit.params(u), s.trace),
                    advisory: s.fit.fit.is_advisory(),
                }
            })
            .collect();
        Ok(out)
    }

    /// κ_ext of `branch` as the median over the lowest-quartile-κ_tot sweeps.
    fn kappa_ext_estimate(sweeps: &[Sweep<'_>], branch: CouplingBranch) -> Estimate {
        let mut order: Vec<&Sweep<'_>> = sweeps.iter().collect();
        order.sort_by(|a, b| a.fit.kappa_tot().as_rad_per_s().total_cmp(&b.fit.kappa_tot().as_rad_per_s()));
        let k = sweeps.len().div_ceil(4).max(1);
        let mut vals: Vec<f64> = order[..k].iter().map(|s| hz(s.fit.params(branch).kappa_ext)).collect();
        let mut sig: Vec<f64> = order[..k].iter().map(|s| s.fit.kappa_ext_sigma_hz(branch)).collect();
        let spread = if k > 1 { mean_sd(&vals).1 / (k as f64).sqrt() } else { 0.0 };
        let s = median(&mut sig);
        Estimate::new(median(&mut vals), s.hypot(spread))
    }

    fn cavity_tls(&mut self, sweeps: &[Sweep<'_>]) -> StageResult<Vec<(CouplingBranch, TlsCavityFit)>> {
        let points: Vec<KappaPoint> = sweeps
            .iter()
            .filter_map(|s| {
                s.run.p_in.map(|p| KappaPoint {
                    t: s.run.t_cryo,
                    p_in: p,
                    kappa_tot: s.fit.kappa_tot(),
                })
            })
            .collect();
        let mut f_c: Vec<f64> = sweeps.iter().map(|s| s.fit.f_c().as_hz()).collect();
        let f_c = Frequency::hz(median(&mut f_c));
        let mut fits = Vec::new();
        let mut errors = Vec::new();
        for branch in [CouplingBranch::Overcoupled, CouplingBranch::Undercoupled] {
            let ke = Self::kappa_ext_estimate(sweeps, branch);
            match self.fit_tls_dropping(&points, AngularRate::two_pi_hz(ke.value), f_c, branch) {
                Ok(fit) => {
                    let p = &fit.params;
                    self.report.cavity_tls.push(CavityTlsResult {
                        branch,
                        kappa_ext_hz: ke,
                        f_c_hz: f_c.as_hz(),
                        kappa_tls0_hz: Estimate::new(hz(p.kappa_tls0), fit.kappa_tls0_sigma_hz()),
                        kappa_dielec0_hz: Estimate::new(hz(p.kappa_dielec0), fit.kappa_dielec0_sigma_hz()),
                        alpha_hz: Estimate::new(hz(p.alpha), fit.alpha_sigma_hz()),
                        t_c_k: Estimate::new(p.t_c.as_kelvin(), fit.t_c_sigma_k()),
                        bcs_fitted: fit.bcs_fitted,
                        p_cav0: p
                            .p_cav0
                            .points
                            .iter()
                            .enumerate()
                            .map(|(i, (t, p0))| SliceP0 {
                                t_k: *t,
                                p0_w: Estimate::new(*p0, fit.p_cav0_sigma_w(i)),
                                rms: fit.slices.get(i).map_or(f64::NAN, |s| s.rms),
                            })
                            .collect(),
                        residual_norm: fit.fit.residual_norm,
                        advisory: fit.fit.is_advisory(),
                    });
                    fits.push((branch, fit));
                }
                Err(e) => errors.push(format!("{branch:?}: {e}")),
            }
        }
        for e in &errors {
            self.notice(Stage::CavityTls, None, format!("TLS fit failed for {e}"));
        }
        if fits.is_empty() {
            return Err(format!("cavity TLS fit failed on both branches ({})", errors.join("; ")));
        }
        self.report.contributing_runs.cavity_tls = sweeps.iter().map(|s| s.run.id.clone()).collect();
        Ok(fits)
    }

    /// Cavity TLS fit; a temperature slice whose `P_cav⁰` the data cannot
    /// constrain is dropped with a notice and the fit repeated.
    fn fit_tls_dropping(
        &mut self,
        points: &[KappaPoint],
        kappa_ext: AngularRate,
        f_c: Frequency,
        branch: CouplingBranch,
    ) -> Result<TlsCavityFit, tls::TlsError> {
        let mut pts = points.to_vec();
        loop {
            match tls::fit_tls_cavity(&pts, kappa_ext, f_c, &self.cfg.tls) {
                Err(tls::TlsError::Unidentifiable { parameter }) => {
                    let slice = parameter
                        .strip_prefix("log10_p_cav0[")
                        .and_then(|r| r.strip_suffix(']'))
                        .and_then(|i| i.parse::<usize>().ok());
                    let mut temps: Vec<i64> = pts.iter().map(|p| t_key(p.t.as_kelvin())).collect();
                    temps.sort();
                    temps.dedup();
                    match slice.and_then(|i| temps.get(i).copied()) {
                        Some(key) if temps.len() > 2 => {
                            self.notice(
                                Stage::CavityTls,
                                None,
                                format!("{branch:?}: P_cav0 at {} mK not constrained; slice dropped", key as f64 * 1e-6),
                            );
                            pts.retain(|p| t_key(p.t.as_kelvin()) != key);
                        }
                        _ => return Err(tls::TlsError::Unidentifiable { parameter }),
                    }
                }
                other => return other,
            }
        }
    }

    fn twpa_tls(&mut self) -> StageResult<Option<TlsTwpaFit>> {
        let to_twpa = self.ds.chain.gain_to(ReferencePlane::TwpaInput);
        let scans: Vec<(&RunRecord, &crate::dataset::TwpaScan)> = self
            .ds
            .runs_of(RunKind::TwpaScan)
            .filter_map(|r| match &r.data {
                RunData::TwpaScan(s) => Some((r, s)),
                _ => None,
            })
            .collect();
        let off: Vec<_> = scans.iter().filter(|(r, _)| r.twpa_pump == TwpaPump::Off).collect();
        if off.is_empty() {
            let msg = "no twpa_scan runs with twpa_pump = off";
            if self.cfg.twpa_correction {
                return Err(format!("{msg}; needed for the TWPA correction (disable it to proceed without)"));
            }
            self.notice(Stage::TwpaTls, None, msg);
            return Ok(None);
        }
        let points: Vec<TransmissionPoint> = off
            .iter()
            .flat_map(|(r, s)| {
                s.p_generator.iter().zip(&s.transmission).map(move |(p, d)| TransmissionPoint {
                    t: r.t_cryo,
                    p_in: p.scaled(to_twpa),
                    delta: *d,
                })
            })
            .collect();
        let f_ref = self
            .report
            .cavity_tls
            .first()
            .map(|c| Frequency::hz(c.f_c_hz))
            .ok_or("no cavity frequency")?;
        let fit = match tls::fit_tls_twpa(&points, f_ref, &self.cfg.tls.solve) {
            Ok(f) => f,
            Err(e) if self.cfg.twpa_correction => return Err(format!("TWPA TLS fit failed: {e}")),
            Err(e) => {
                self.notice(Stage::TwpaTls, None, format!("TWPA TLS fit failed: {e}"));
                return Ok(None);
            }
        };
        let model = |t: Temperature, p: Power| tls::twpa_transmission(&fit.params, t, p, true).ok();
        let mut rows = Vec::new();
        let mut gains = Vec::new();
        for (r, s) in &scans {
            let pair = off
                .iter()
                .find(|(o, os)| t_key(o.t_cryo.as_kelvin()) == t_key(r.t_cryo.as_kelvin()) && os.p_generator == s.p_generator);
            let mut norm = 1.0;
            if r.twpa_pump == TwpaPump::On {
                let Some((_, os)) = pair else {
                    self.notice(Stage::TwpaTls, Some(&r.id), "no matching pump-off scan; gain not normalized");
                    continue;
                };
                let n_low = s.transmission.len().div_ceil(4).max(1);
                let mut ratio: Vec<f64> = s.transmission[..n_low]
                    .iter()
                    .zip(&os.transmission)
                    .map(|(a, b)| a / b)
                    .collect();
                norm = median(&mut ratio);
                let limit = 10f64.powf(-0.1);
                let compression = s
                    .transmission
                    .iter()
                    .zip(&os.transmission)
                    .zip(&s.p_generator)
                    .find(|((a, b), _)| *a / norm / *b < limit)
                    .map(|(_, p)| p.scaled(to_twpa).as_watts());
                gains.push(TwpaGain {
                    t_k: r.t_cryo.as_kelvin(),
                    gain_db: 10.0 * norm.log10(),
                    compression_1db_w: compression,
                });
            }
            for (p, d) in s.p_generator.iter().zip(&s.transmission) {
                let p = p.scaled(to_twpa);
                rows.push(TransmissionRow {
                    t_k: r.t_cryo.as_kelvin(),
                    p_twpa_w: p.as_watts(),
                    twpa_pump: r.twpa_pump,
                    delta: d / norm,
                    delta_model: model(r.t_cryo, p),
                });
            }
        }
        self.report.twpa_tls = Some(TwpaTlsResult {
            lambda0: Estimate::new(fit.params.lambda0, fit.lambda0_sigma()),
            beta: Estimate::new(fit.params.beta, fit.beta_sigma()),
            p_twpa0: fit
                .params
                .p_twpa0
                .points
                .iter()
                .enumerate()
                .map(|(i, (t, p0))| SliceP0 {
                    t_k: *t,
                    p0_w: Estimate::new(*p0, fit.p_twpa0_sigma_w(i)),
                    rms: fit.slices.get(i).map_or(f64::NAN, |s| s.rms),
                })
                .collect(),
            residual_norm: fit.fit.residual_norm,
            advisory: fit.fit.is_advisory(),
            gains,
            points: rows,
        });
        self.report.contributing_runs.twpa_tls = off.iter().map(|(r, _)| r.id.clone()).collect();
        Ok(Some(fit))
    }

    fn peaks(&mut self) -> StageResult<Vec<Peak<'d>>> {
        let mut candidates = Vec::new();
        for r in self.ds.runs_of(RunKind::SidebandSpectrum) {
            let Some(scheme) = r.scheme.pump() else {
                self.notice(Stage::Peaks, Some(&r.id), "excluded: probe_only spectrum has no sideband");
                continue;
            };
            if r.flag == Some(RunFlag::SelfOscillating) {
                self.notice(Stage::Peaks, Some(&r.id), "excluded: flagged self_oscillating");
                continue;
            }
            if let RunData::Spectrum(s) = &r.data {
                candidates.push((r, scheme, s));
            }
        }
        let opts = &self.cfg.peak;
        let fits: Vec<_> = candidates.par_iter().map(|(_, _, s)| integrate_peak(s, opts)).collect();
        let f_c = self.report.cavity_tls.first().map(|c| Frequency::hz(c.f_c_hz));
        let knee = Power::watts(self.ds.manifest.options.twpa_knee_w);
        let mut out = Vec::new();
        for ((run, scheme, _), res) in candidates.into_iter().zip(fits) {
            match res {
                Ok(peak) => {
                    if let Some(f_c) = f_c {
                        let p_sig = optomech::signal_power_at_twpa(peak.area, f_c, &self.ds.chain);
                        if p_sig > knee {
                            self.notice(
                                Stage::Peaks,
                                Some(&run.id),
                                format!(
                                    "excluded: TWPA saturated, signal {:.3e} W above knee {:.3e} W",
                                    p_sig.as_watts(),
                                    knee.as_watts()
                                ),
                            );
                            continue;
                        }
                    }
                    if peak.low_confidence {
                        self.notice(Stage::Peaks, Some(&run.id), format!("low confidence, SNR {:.1}", peak.snr));
                    }
                    if !peak.methods_agree {
                        self.notice(Stage::Peaks, Some(&run.id), "fitted and trapezoid areas disagree");
                    }
                    out.push(Peak { run, scheme, peak });
                }
                Err(e) => self.notice(Stage::Peaks, Some(&run.id), format!("excluded: {e}")),
            }
        }
        if out.is_empty() {
            return Err("no usable sideband peaks".into());
        }
        self.report.peaks = out
            .iter()
            .map(|p| PeakResult {
                run_id: p.run.id.clone(),
                t_k: p.run.t_cryo.as_kelvin(),
                scheme: p.run.scheme,
                p_in_w: p.run.p_in.map_or(f64::NAN, |x| x.as_watts()),
                center_hz: Estimate::new(p.peak.center_hz, p.peak.center_sigma_hz),
                fwhm_hz: Estimate::new(p.peak.fwhm_hz, p.peak.fwhm_sigma_hz),
                area: Estimate::new(p.peak.area, p.peak.area_sigma),
                trapezoid_area: p.peak.trapezoid_area,
                snr: p.peak.snr,
                low_confidence: p.peak.low_confidence,
                methods_agree: p.peak.methods_agree,
            })
            .collect();
        Ok(out)
    }

    /// Temperature group with at least the minimum ramp length for every
    /// scheme present; most points wins, ties go to the lower temperature.
    fn ramp_group(peaks: &[Peak<'_>]) -> Option<(i64, Vec<usize>)> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, p) in peaks.iter().enumerate() {
            groups.entry(t_key(p.run.t_cryo.as_kelvin())).or_default().push(i);
        }
        let mut best: Option<(i64, Vec<usize>)> = None;
        for (k, idx) in groups {
            let ok = [PumpScheme::Blue, PumpScheme::Red].iter().all(|s| {
                let n = idx.iter().filter(|&&i| peaks[i].scheme == *s).count();
                n == 0 || n >= g0::MIN_RAMP_POINTS
            });
            if ok && best.as_ref().is_none_or(|(_, b)| idx.len() > b.len()) {
                best = Some((k, idx));
            }
        }
        best
    }

    fn optomech_params(&self, branch: CouplingBranch, tls_fit: &TlsCavityFit, g0: f64) -> StageResult<OptomechParams> {
        let dev = &self.ds.manifest.device;
        Ok(OptomechParams {
            omega_m: dev.omega_m(),
            gamma_m: dev.gamma_m_table()?,
            g0: AngularRate::two_pi_hz(g0),
            f_c: tls_fit.params.f_c,
            kappa_ext: tls_fit.kappa_ext,
            branch,
        })
    }

    fn branch_work(
        &self,
        branch: CouplingBranch,
        tls_fit: TlsCavityFit,
        peaks: &[Peak<'_>],
        twpa: Option<&TwpaTlsParams>,
    ) -> BranchWork {
        let mut notices = Vec::new();
        let mut note = |stage, run: Option<&str>, msg: String| {
            notices.push(Notice {
                stage,
                run_id: run.map(str::to_owned),
                message: msg,
            })
        };
        let ex = self.cfg.extrapolate;
        let g0 = Self::ramp_group(peaks).and_then(|(key, idx)| {
            let mut points = Vec::new();
            for i in idx {
                let p = &peaks[i];
                let p_in = p.run.p_in?;
                match tls_fit.kappa_tot(p.run.t_cryo, p_in, ex) {
                    Ok(kt) => points.push(RampPoint {
                        run_id: p.run.id.clone(),
                        scheme: p.scheme,
                        p_in,
                        gamma_eff: AngularRate::two_pi_hz(p.peak.fwhm_hz),
                        gamma_eff_sigma: AngularRate::two_pi_hz(p.peak.fwhm_sigma_hz),
                        kappa_tot: kt,
                    }),
                    Err(e) => note(Stage::G0, Some(&p.run.id), format!("excluded from ramp: {e}")),
                }
            }
            let ctx = G0Context {
                omega_m: self.ds.manifest.device.omega_m(),
                f_c: tls_fit.params.f_c,
                kappa_ext: tls_fit.kappa_ext,
            };
            match g0::extract_g0(&points, &ctx, KappaCorrection::PerPoint) {
                Ok(est) => Some((key as f64 * 1e-9, est)),
                Err(e) => {
                    note(Stage::G0, None, format!("{branch:?}: {e}"));
                    None
                }
            }
        });
        let mut runs = Vec::new();
        if let Some((_, est)) = g0.as_ref().filter(|(_, e)| !e.unresolved) {
            let params = match self.optomech_params(branch, &tls_fit, est.g0_hz) {
                Ok(p) => p,
                Err(e) => {
                    note(Stage::Phonon, None, e);
                    return BranchWork { branch, tls: tls_fit, g0, runs, notices };
                }
            };
            let opts = PhononAreaOptions {
                twpa_knee: Power::watts(self.ds.manifest.options.twpa_knee_w),
                extrapolate: ex,
            };
            let corr = match (self.cfg.twpa_correction, twpa) {
                (true, Some(tw)) => TwpaCorrection::Apply(tw),
                _ => TwpaCorrection::Disabled,
            };
            for (i, p) in peaks.iter().enumerate() {
                let Some(p_in) = p.run.p_in else { continue };
                let res = optomech::phonon_area(
                    p.peak.area,
                    p.scheme,
                    p.run.t_cryo,
                    p_in,
                    &params,
                    &tls_fit.params,
                    corr,
                    &self.ds.chain,
                    &opts,
                );
                match res {
                    Ok(area) => {
                        let n = optomech::bose_einstein(params.omega_m, p.run.t_cryo);
                        let expected = optomech::sideband_phonons(n, p.scheme, self.cfg.asymmetry);
                        runs.push(BranchRun { peak: i, area, expected });
                    }
                    Err(e) => note(Stage::Phonon, Some(&p.run.id), format!("excluded: {e}")),
                }
            }
        } else if g0.is_some() {
            note(Stage::G0, None, format!("{branch:?}: g0 unresolved"));
        }
        BranchWork { branch, tls: tls_fit, g0, runs, notices }
    }

    fn high_t_ratio(&self, w: &BranchWork, peaks: &[Peak<'_>]) -> (f64, usize, f64) {
        let t_of = |r: &BranchRun| peaks[r.peak].run.t_cryo.as_kelvin();
        let t_max = w.runs.iter().map(t_of).fold(f64::NEG_INFINITY, f64::max);
        let t_min = if w.runs.iter().any(|r| t_of(r) >= self.cfg.high_t_min_k) {
            self.cfg.high_t_min_k
        } else {
            t_max
        };
        let mut v: Vec<f64> = w
            .runs
            .iter()
            .filter(|r| t_of(r) >= t_min)
            .map(|r| r.area.a_ph / r.expected)
            .collect();
        let n = v.len();
        (median(&mut v), n, t_min)
    }

    fn decide(&mut self, works: &[BranchWork], peaks: &[Peak<'_>]) -> StageResult<usize> {
        let mut cands = Vec::new();
        let mut t_used = self.cfg.high_t_min_k;
        for w in works {
            let (ratio, n, t_min) = self.high_t_ratio(w, peaks);
            if n > 0 {
                t_used = t_min;
            }
            let ssr: f64 = self
                .report
                .cavity
                .iter()
                .map(|c| match w.branch {
                    CouplingBranch::Overcoupled => c.ssr_overcoupled,
                    CouplingBranch::Undercoupled => c.ssr_undercoupled,
                })
                .sum();
            cands.push(BranchCandidate {
                branch: w.branch,
                high_t_ratio: ratio,
                n_runs: n,
                sweep_ssr: ssr,
                tls_residual_norm: w.tls.fit.residual_norm,
            });
        }
        let usable: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].n_runs > 0 && cands[i].high_t_ratio.is_finite()).collect();
        let (chosen, ambiguous, why) = match usable.as_slice() {
            [] => return Err("no branch produced phonon areas".into()),
            [i] => (*i, false, format!("only the {:?} branch produced phonon areas", cands[*i].branch)),
            _ => {
                let (a, b) = (usable[0], usable[1]);
                let (ra, rb) = (cands[a].high_t_ratio, cands[b].high_t_ratio);
                let close = (ra / rb - 1.0).abs() < self.cfg.ambiguity_threshold;
                if close {
                    let over = usable.iter().copied().find(|&i| cands[i].branch == CouplingBranch::Overcoupled).unwrap_or(a);
                    (
                        over,
                        true,
                        format!(
                            "high-T ratios {ra:.3} and {rb:.3} differ by less than {:.0}%; defaulting to overcoupled",
                            100.0 * self.cfg.ambiguity_threshold
                        ),
                    )
                } else {
                    let pick = if (ra - 1.0).abs() <= (rb - 1.0).abs() { a } else { b };
                    (
                        pick,
                        false,
                        format!(
                            "{:?} gives A_ph/n_ph = {:.3} at T >= {:.0} mK, closer to 1 than {:.3}",
                            cands[pick].branch,
                            cands[pick].high_t_ratio,
                            t_used * 1e3,
                            cands[if pick == a { b } else { a }].high_t_ratio
                        ),
                    )
                }
            }
        };
        let idx = works.iter().position(|w| w.branch == cands[chosen].branch).expect("candidate");
        self.report.branch = Some(BranchDecision {
            chosen: cands[chosen].branch,
            ambiguous,
            high_t_min_k: t_used,
            candidates: cands,
            justification: why,
        });
        Ok(idx)
    }

    fn uncertainty(&mut self, w: &BranchWork, peaks: &[Peak<'_>]) {
        let cfg = self.cfg;
        let est = &w.g0.as_ref().expect("chosen branch has g0").1;
        let om = self.ds.manifest.device.omega_m();
        let gm_table = self.ds.manifest.device.gamma_m_table().ok();
        let results: Vec<(PhononResult, Option<f64>, Option<String>)> = w
            .runs
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let p = &peaks[r.peak];
                let t = p.run.t_cryo;
                let gm = gm_table
                    .as_ref()
                    .and_then(|g| g.linear(t.as_kelvin(), cfg.extrapolate).ok())
                    .map_or(AngularRate::rad_per_s(f64::NAN), AngularRate::rad_per_s);
                let base = PhononInputs {
                    a_sdb: r.area.a_sdb,
                    p_in_w: p.run.p_in.expect("peak with power").as_watts(),
                    g0: est.g0(),
                    kappa_ext: w.tls.kappa_ext,
                    kappa_tot: r.area.kappa_tot,
                    omega_m: om,
                    gamma_m: gm,
                    f_c: w.tls.params.f_c,
                    scheme: p.scheme,
                };
                let area_sd = if p.peak.area > 0.0 { p.peak.area_sigma / p.peak.area } else { 0.0 };
                let n = optomech::bose_einstein(om, t);
                let hw_t = 0.95 * p.run.t_uncertainty;
                let n_lo = optomech::bose_einstein(om, Temperature::kelvin(t.as_kelvin() * (1.0 - hw_t)));
                let n_hi = optomech::bose_einstein(om, Temperature::kelvin(t.as_kelvin() * (1.0 + hw_t)));
                let ratio = r.area.a_ph / r.expected;
                let mut warn = None;
                let (a_iv, r_iv, budget) = if cfg.mc_samples == 0 {
                    (Interval { value: r.area.a_ph, lo95: r.area.a_ph, hi95: r.area.a_ph }, Interval { value: ratio, lo95: ratio, hi95: ratio }, None)
                } else {
                    let s1 = run_seed(cfg.seed, 1, i);
                    let s2 = run_seed(cfg.seed, 2, i);
                    let s3 = run_seed(cfg.seed, 3, i);
                    let a = budget::propagate_phonons(&base, &cfg.budget, area_sd, cfg.mc_samples, s1);
                    let q = budget::propagate_ratio(&base, &cfg.budget, area_sd, t, p.run.t_uncertainty, cfg.asymmetry, cfg.mc_samples, s2);
                    let b = budget::propagate_phonons(&base, &cfg.budget, 0.0, cfg.mc_samples, s3);
                    let iv = |v: f64, s: &Result<McSummary, FitError>| match s {
                        Ok(s) => Interval::from_mc(v, s),
                        Err(_) => Interval { value: v, lo95: f64::NAN, hi95: f64::NAN },
                    };
                    for s in [&a, &q, &b] {
                        match s {
                            Err(e) => warn = Some(format!("uncertainty propagation failed: {e}")),
                            Ok(s) if s.failure_rate() > 0.01 => {
                                warn = Some(format!("{:.1}% of Monte-Carlo samples failed", 100.0 * s.failure_rate()))
                            }
                            _ => {}
                        }
                    }
                    (iv(r.area.a_ph, &a), iv(ratio, &q), b.ok().map(|s| s.rel_half_width_95()))
                };
                let res = PhononResult {
                    run_id: p.run.id.clone(),
                    t_k: t.as_kelvin(),
                    scheme: p.run.scheme,
                    p_in_w: base.p_in_w,
                    a_ph: a_iv,
                    n_ph: Interval { value: n, lo95: n_lo, hi95: n_hi },
                    ratio: r_iv,
                    g_opt: r.area.g_opt,
                    conversion_m: r.area.m,
                    delta: r.area.delta,
                    kappa_tot_hz: hz(r.area.kappa_tot),
                    p_signal_w: r.area.p_signal_twpa.as_watts(),
                    low_confidence: p.peak.low_confidence,
                };
                (res, budget, warn)
            })
            .collect();
        if cfg.mc_samples == 0 {
            self.notice(Stage::Uncertainty, None, "Monte-Carlo propagation disabled; intervals are degenerate");
        }
        let mut budgets = Vec::new();
        let mut runs = Vec::new();
        for (res, b, warn) in results {
            if let Some(wm) = warn {
                self.notice(Stage::Uncertainty, Some(&res.run_id), wm);
            }
            budgets.extend(b);
            runs.push(res);
        }
        runs.sort_by(|a, b| a.t_k.total_cmp(&b.t_k).then(a.run_id.cmp(&b.run_id)));

        let mut groups: BTreeMap<i64, Vec<&PhononResult>> = BTreeMap::new();
        for r in &runs {
            groups.entry(t_key(r.t_k)).or_default().push(r);
        }
        self.report.ratio_vs_t = groups
            .values()
            .map(|g| {
                let vals: Vec<f64> = g.iter().map(|r| r.ratio.value).collect();
                let (m, sd) = mean_sd(&vals);
                let mut hw: Vec<f64> = g.iter().map(|r| r.ratio.rel_half_width()).collect();
                let mut d: Vec<f64> = g.iter().map(|r| r.delta).collect();
                RatioAtT {
                    t_k: g[0].t_k,
                    n_runs: g.len(),
                    mean: m,
                    std_err: sd / (g.len() as f64).sqrt(),
                    systematic_half_width: median(&mut hw),
                    delta: median(&mut d),
                }
            })
            .collect();
        let all: Vec<f64> = runs.iter().map(|r| r.ratio.value).collect();
        let warm: Vec<f64> = runs.iter().filter(|r| r.t_k >= cfg.scatter_min_k).map(|r| r.ratio.value).collect();
        let (wm, wsd) = mean_sd(&warm);
        let phonons_at_base = groups.values().next().map(|g| {
            let v = g.iter().map(|r| r.a_ph.value).sum::<f64>() / g.len() as f64;
            let mut hw: Vec<f64> = g.iter().map(|r| r.a_ph.rel_half_width()).collect();
            let h = median(&mut hw);
            Interval { value: v, lo95: v * (1.0 - h), hi95: v * (1.0 + h) }
        });
        self.report.summary = Some(Summary {
            n_runs: runs.len(),
            ratio_mean: mean_sd(&all).0,
            scatter_95: 1.96 * wsd / wm,
            error_budget_95: median(&mut budgets),
            phonons_at_base,
        });
        self.report.contributing_runs.phonon = runs.iter().map(|r| r.run_id.clone()).collect();
        self.report.runs = runs;
    }

    fn compare_truth(&mut self) {
        let Some(gt) = &self.ds.manifest.ground_truth else { return };
        let d = &gt.device;
        let chosen = self.report.chosen_branch();
        let mut values = BTreeMap::new();
        let truth_branch = d.branch();
        let branch = chosen.unwrap_or(truth_branch);
        if let Some(c) = self.report.cavity_tls_for(branch) {
            values.insert("kappa_ext_hz".into(), Comparison::new(d.kappa_ext_hz, c.kappa_ext_hz.value));
            values.insert("kappa_tls0_hz".into(), Comparison::new(d.kappa_tls0_hz, c.kappa_tls0_hz.value));
            values.insert("kappa_dielec0_hz".into(), Comparison::new(d.kappa_dielec0_hz, c.kappa_dielec0_hz.value));
            values.insert("f_c_hz".into(), Comparison::new(d.f_c_hz, c.f_c_hz));
            if c.bcs_fitted {
                values.insert("alpha_hz".into(), Comparison::new(d.alpha_hz, c.alpha_hz.value));
                values.insert("t_c_k".into(), Comparison::new(d.t_c_k, c.t_c_k.value));
            }
        }
        if let Some(g) = self.report.g0_for(branch) {
            values.insert("g0_hz".into(), Comparison::new(d.g0_hz, g.estimate.g0_hz));
        }
        if let Some(tw) = &self.report.twpa_tls {
            values.insert("lambda0".into(), Comparison::new(d.lambda0, tw.lambda0.value));
            values.insert("beta".into(), Comparison::new(d.beta, tw.beta.value));
        }
        if let Some(s) = &self.report.summary {
            values.insert("ratio_mean".into(), Comparison::new(1.0, s.ratio_mean));
        }
        self.report.ground_truth = Some(GroundTruthComparison {
            branch_truth: truth_branch,
            branch_chosen: chosen,
            values,
        });
    }

    fn stop(&self, stage: Stage) -> bool {
        self.cfg.stop_after == Some(stage)
    }

    fn execute(&mut self) -> Result<(), StageFailure> {
        let fail = |stage| move |message: String| StageFailure { stage, message };
        self.validate().map_err(fail(Stage::Validate))?;
        if self.stop(Stage::Validate) {
            return Ok(());
        }
        let sweeps = self.cavity().map_err(fail(Stage::Cavity))?;
        if self.stop(Stage::Cavity) {
            return Ok(());
        }
        let tls_fits = self.cavity_tls(&sweeps).map_err(fail(Stage::CavityTls))?;
        if self.stop(Stage::CavityTls) {
            return Ok(());
        }
        let twpa = self.twpa_tls().map_err(fail(Stage::TwpaTls))?;
        if self.stop(Stage::TwpaTls) {
            return Ok(());
        }
        let peaks = self.peaks().map_err(fail(Stage::Peaks))?;
        if self.stop(Stage::Peaks) {
            return Ok(());
        }
        let twpa_params = twpa.as_ref().map(|f| &f.params);
        let works: Vec<BranchWork> = tls_fits
            .into_iter()
            .map(|(b, f)| self.branch_work(b, f, &peaks, twpa_params))
            .collect();
        for w in &works {
            if let Some((t, est)) = &w.g0 {
                self.report.g0.push(BranchG0 {
                    branch: w.branch,
                    t_k: *t,
                    estimate: est.clone(),
                });
            }
        }
        if self.report.g0.is_empty() {
            let msg = works
                .iter()
                .flat_map(|w| w.notices.iter().filter(|n| n.stage == Stage::G0).map(|n| n.message.clone()))
                .collect::<Vec<_>>();
            let detail = if msg.is_empty() {
                format!("no temperature has a ramp of {} sub-threshold spectra per scheme", g0::MIN_RAMP_POINTS)
            } else {
                msg.join("; ")
            };
            return Err(StageFailure { stage: Stage::G0, message: detail });
        }
        if self.stop(Stage::G0) {
            return Ok(());
        }
        let chosen = self.decide(&works, &peaks).map_err(fail(Stage::Branch))?;
        let w = &works[chosen];
        for (stage, run_id, message) in w.notices.iter().map(|n| (n.stage, n.run_id.clone(), n.message.clone())) {
            self.report.notices.push(Notice { stage, run_id, message });
        }
        if let Some((_, est)) = &w.g0 {
            if est.discrepant {
                self.notice(
                    Stage::G0,
                    None,
                    format!("blue and red g0 differ by {:.1} sigma", est.discrepancy_sigma),
                );
            }
            self.report.contributing_runs.g0 = est.run_ids.clone();
        }
        if self.stop(Stage::Phonon) || self.stop(Stage::Branch) {
            return Ok(());
        }
        self.uncertainty(w, &peaks);
        Ok(())
    }
}

/// Run every stage on `ds`. A stage failure ends the run; the report then
/// carries the results of the completed stages and the failure.
pub fn run_calibration(ds: &Dataset, cfg: &CalibrationConfig) -> CalibrationReport {
    let report = CalibrationReport {
        format_version: REPORT_FORMAT_VERSION,
        provenance: Provenance {
            tool: "optocal".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: ds.hashes.clone(),
            seed: cfg.seed,
            twpa_correction: cfg.twpa_correction,
            asymmetry: cfg.asymmetry,
            mc_samples: cfg.mc_samples,
        },
        failure: None,
        notices: Vec::new(),
        cavity: Vec::new(),
        cavity_tls: Vec::new(),
        twpa_tls: None,
        peaks: Vec::new(),
        g0: Vec::new(),
        branch: None,
        runs: Vec::new(),
        ratio_vs_t: Vec::new(),
        summary: None,
        contributing_runs: ContributingRuns {
            cavity_tls: Vec::new(),
            twpa_tls: Vec::new(),
            g0: Vec::new(),
            phonon: Vec::new(),
        },
        ground_truth: None,
    };
    let mut run = Run { ds, cfg, report };
    if let Err(f) = run.execute() {
        run.report.failure = Some(f);
    }
    run.compare_truth();
    run.report
}

/// Generate `scenario` in memory and calibrate it.
pub fn run_synthetic(scenario: &crate::synth::ScenarioConfig, cfg: &CalibrationConfig) -> Result<CalibrationReport, String> {
    let synth = crate::synth::synthesize(scenario).map_err(|e| e.to_string())?;
    let ds = synth.to_dataset().map_err(|e| e.to_string())?;
    Ok(run_calibration(&ds, cfg))
}
