//! Linearized optomechanics: dynamical backaction, optomechanical gain and
//! the photon-rate → phonon conversion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cavity::CouplingBranch;
use crate::tls::{self, TempTable, TlsError, TlsLossParams, TwpaTlsParams};
use crate::units::{AngularRate, ChainCal, Frequency, Gain, Power, Temperature, BOLTZMANN, HBAR};

/// Default TWPA saturation knee at its input.
pub const DEFAULT_TWPA_KNEE_W: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum OptomechError {
    #[error("mechanical mode self-oscillates: Γ_opt = {gamma_opt:.4e} rad/s ≥ Γ_m = {gamma_m:.4e} rad/s")]
    SelfOscillating { gamma_opt: f64, gamma_m: f64 },
    #[error("signal power {p_signal_w:.3e} W at the TWPA input exceeds the saturation knee {knee_w:.3e} W")]
    TwpaSaturated { p_signal_w: f64, knee_w: f64 },
    #[error("invalid optomechanical parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tls(#[from] TlsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpScheme {
    /// Pump at `ω_c + Ω_m`: anti-damping, `Γ_eff = Γ_m − Γ_opt`.
    Blue,
    /// Pump at `ω_c − Ω_m`: extra damping, `Γ_eff = Γ_m + Γ_opt`.
    Red,
}

impl PumpScheme {
    fn sign(self) -> f64 {
        match self {
            Self::Blue => -1.0,
            Self::Red => 1.0,
        }
    }

    pub fn pump_frequency(self, f_c: Frequency, omega_m: AngularRate) -> Frequency {
        Frequency::hz(f_c.as_hz() - self.sign() * omega_m.as_hz())
    }
}

/// Mechanical mode and its coupling to the cavity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptomechParams {
    pub omega_m: AngularRate,
    /// Intrinsic damping `Γ_m(T)` in rad/s, interpolated linearly.
    pub gamma_m: TempTable,
    pub g0: AngularRate,
    pub f_c: Frequency,
    pub kappa_ext: AngularRate,
    pub branch: CouplingBranch,
}

impl OptomechParams {
    pub fn validate(&self) -> Result<(), OptomechError> {
        let checks = [
            ("omega_m", self.omega_m.as_rad_per_s()),
            ("g0", self.g0.as_rad_per_s()),
            ("kappa_ext", self.kappa_ext.as_rad_per_s()),
            ("f_c", self.f_c.as_hz()),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(OptomechError::InvalidParams(format!("{name} = {v} must be > 0")));
            }
        }
        if self.gamma_m.points.iter().any(|(_, g)| !(*g > 0.0)) {
            return Err(OptomechError::InvalidParams("gamma_m entries must be > 0".into()));
        }
        Ok(())
    }

    pub fn gamma_m_at(&self, t: Temperature, extrapolate: bool) -> Result<AngularRate, OptomechError> {
        Ok(AngularRate::rad_per_s(self.gamma_m.linear(t.as_kelvin(), extrapolate)?))
    }

    /// `Ω_m > κ_tot`.
    pub fn is_sideband_resolved(&self, kappa_tot: AngularRate) -> bool {
        self.omega_m > kappa_tot
    }

    /// `κ_tot(T, P) = κ_ext + κ_in(T, P)`.
    pub fn kappa_tot(
        &self,
        tls: &TlsLossParams,
        t: Temperature,
        p_in: Power,
        extrapolate: bool,
    ) -> Result<AngularRate, OptomechError> {
        Ok(self.kappa_ext + tls::kappa_in(tls, t, p_in, extrapolate)?)
    }
}

/// `Γ_opt` at an explicit `κ_tot`, full sideband denominator.
pub fn gamma_opt_at(params: &OptomechParams, kappa_tot: AngularRate, p_in: Power) -> AngularRate {
    let g0 = params.g0.as_rad_per_s();
    let kt = kappa_tot.as_rad_per_s();
    let ke = params.kappa_ext.as_rad_per_s();
    let wc = params.f_c.to_angular().as_rad_per_s();
    let om = params.omega_m.as_rad_per_s();
    AngularRate::rad_per_s(4.0 * g0 * g0 / kt * ke * p_in.as_watts() / (HBAR * wc * (om * om + 0.25 * kt * kt)))
}

/// Optomechanical damping rate at on-chip power `p_in`.
pub fn gamma_opt(
    params: &OptomechParams,
    tls: &TlsLossParams,
    t: Temperature,
    p_in: Power,
    extrapolate: bool,
) -> Result<AngularRate, OptomechError> {
    let kt = params.kappa_tot(tls, t, p_in, extrapolate)?;
    Ok(gamma_opt_at(params, kt, p_in))
}

/// Effective mechanical damping, or the self-oscillating state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MechanicalState {
    Damped { gamma_eff: AngularRate },
    SelfOscillating { gamma_opt: AngularRate, gamma_m: AngularRate },
}

impl MechanicalState {
    pub fn gamma_eff(&self) -> Option<AngularRate> {
        match self {
            Self::Damped { gamma_eff } => Some(*gamma_eff),
            Self::SelfOscillating { .. } => None,
        }
    }

    pub fn is_self_oscillating(&self) -> bool {
        matches!(self, Self::SelfOscillating { .. })
    }
}

/// `Γ_m ± Γ_opt` from already-evaluated rates.
pub fn gamma_eff_from(scheme: PumpScheme, gamma_m: AngularRate, gamma_opt: AngularRate) -> MechanicalState {
    let g = gamma_m.as_rad_per_s() + scheme.sign() * gamma_opt.as_rad_per_s();
    if g > 0.0 {
        MechanicalState::Damped {
            gamma_eff: AngularRate::rad_per_s(g),
        }
    } else {
        MechanicalState::SelfOscillating { gamma_opt, gamma_m }
    }
}

pub fn gamma_eff(
    scheme: PumpScheme,
    params: &OptomechParams,
    tls: &TlsLossParams,
    t: Temperature,
    p_in: Power,
    extrapolate: bool,
) -> Result<MechanicalState, OptomechError> {
    let gm = params.gamma_m_at(t, extrapolate)?;
    let go = gamma_opt(params, tls, t, p_in, extrapolate)?;
    Ok(gamma_eff_from(scheme, gm, go))
}

/// `G_opt = Γ_m / Γ_eff`.
pub fn g_opt_from(state: MechanicalState, gamma_m: AngularRate) -> Result<f64, OptomechError> {
    match state {
        MechanicalState::Damped { gamma_eff } => Ok(gamma_m.as_rad_per_s() / gamma_eff.as_rad_per_s()),
        MechanicalState::SelfOscillating { gamma_opt, gamma_m } => Err(OptomechError::SelfOscillating {
            gamma_opt: gamma_opt.as_rad_per_s(),
            gamma_m: gamma_m.as_rad_per_s(),
        }),
    }
}

pub fn g_opt(
    scheme: PumpScheme,
    params: &OptomechParams,
    tls: &TlsLossParams,
    t: Temperature,
    p_in: Power,
    extrapolate: bool,
) -> Result<f64, OptomechError> {
    let gm = params.gamma_m_at(t, extrapolate)?;
    let state = gamma_eff(scheme, params, tls, t, p_in, extrapolate)?;
    g_opt_from(state, gm)
}

/// Conversion factor `M = 4 g₀² κ_ext² / (ħ Ω_m² ω_c κ_tot²)` in 1/(W·s).
pub fn conversion_m_at(params: &OptomechParams, kappa_tot: AngularRate) -> f64 {
    let g0 = params.g0.as_rad_per_s();
    let ke = params.kappa_ext.as_rad_per_s();
    let kt = kappa_tot.as_rad_per_s();
    let om = params.omega_m.as_rad_per_s();
    let wc = params.f_c.to_angular().as_rad_per_s();
    4.0 * g0 * g0 * ke * ke / (HBAR * om * om * wc * kt * kt)
}

pub fn conversion_m(
    params: &OptomechParams,
    tls: &TlsLossParams,
    t: Temperature,
    p_in: Power,
    extrapolate: bool,
) -> Result<f64, OptomechError> {
    let kt = params.kappa_tot(tls, t, p_in, extrapolate)?;
    Ok(conversion_m_at(params, kt))
}

/// Bose-Einstein occupation `1/(exp(ħΩ_m/k_B T) − 1)`.
pub fn bose_einstein(omega_m: AngularRate, t: Temperature) -> f64 {
    let x = HBAR * omega_m.as_rad_per_s() / (BOLTZMANN * t.as_kelvin());
    1.0 / x.exp_m1()
}

/// Area in phonons seen by each scheme for a mode holding `n` phonons.
///
/// With `asymmetry` on, the blue sideband measures `n + 1` and the red one
/// `n`; otherwise both measure `n`.
pub fn sideband_phonons(n: f64, scheme: PumpScheme, asymmetry: bool) -> f64 {
    match (asymmetry, scheme) {
        (true, PumpScheme::Blue) => n + 1.0,
        _ => n,
    }
}

/// Blue-pump power where `Γ_opt = Γ_m`.
pub fn self_oscillation_threshold(
    params: &OptomechParams,
    tls: &TlsLossParams,
    t: Temperature,
    extrapolate: bool,
) -> Result<Power, OptomechError> {
    let gm = params.gamma_m_at(t, extrapolate)?.as_rad_per_s();
    let excess = |lp: f64| -> Result<f64, OptomechError> {
        Ok(gamma_opt(params, tls, t, Power::watts(10f64.powf(lp)), extrapolate)?.as_rad_per_s() - gm)
    };
    let (mut lo, mut hi) = (-30.0, 3.0);
    if excess(hi)? < 0.0 {
        return Err(OptomechError::InvalidParams("no self-oscillation threshold below 1 kW".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(Power::watts(10f64.powf(0.5 * (lo + hi))))
}

/// How the TWPA TLS insertion loss is handled.
#[derive(Debug, Clone, Copy)]
pub enum TwpaCorrection<'a> {
    Apply(&'a TwpaTlsParams),
    /// Explicitly skip the correction (`δ = 1`).
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhononAreaOptions {
    pub twpa_knee: Power,
    pub extrapolate: bool,
}

impl Default for PhononAreaOptions {
    fn default() -> Self {
        Self {
            twpa_knee: Power::watts(DEFAULT_TWPA_KNEE_W),
            extrapolate: false,
        }
    }
}

/// Intermediate and final values of the sideband → phonon normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhononArea {
    /// Area in phonons.
    pub a_ph: f64,
    /// Sideband area on chip, photons/s, TWPA loss removed.
    pub a_sdb: f64,
    pub g_opt: f64,
    pub m: f64,
    pub delta: f64,
    pub kappa_tot: AngularRate,
    pub p_signal_twpa: Power,
}

/// Sideband power at the TWPA input for a recorded area in photons/s.
pub fn signal_power_at_twpa(a_recorded: f64, f_c: Frequency, chain: &ChainCal) -> Power {
    let a_chip = a_recorded / chain.detection_gain().linear();
    let photon = HBAR * f_c.to_angular().as_rad_per_s();
    Power::watts(a_chip * photon).scaled(Gain::db(chain.chip_to_twpa_db))
}

/// Convert a recorded sideband area to phonons.
///
/// `a_recorded` is the integrated peak in photons/s as recorded, i.e. after
/// the detection chain. It is de-embedded with the chain gain, corrected for
/// the TWPA TLS transmission at the signal power, and divided by
/// `G_opt · M · P_in`.
#[allow(clippy::too_many_arguments)]
pub fn phonon_area(
    a_recorded: f64,
    scheme: PumpScheme,
    t: Temperature,
    p_in: Power,
    params: &OptomechParams,
    tls: &TlsLossParams,
    twpa: TwpaCorrection<'_>,
    chain: &ChainCal,
    opts: &PhononAreaOptions,
) -> Result<PhononArea, OptomechError> {
    if !(a_recorded.is_finite() && a_recorded >= 0.0) {
        return Err(OptomechError::InvalidParams(format!("sideband area {a_recorded} must be >= 0")));
    }
    let a_chip = a_recorded / chain.detection_gain().linear();
    let p_signal = signal_power_at_twpa(a_recorded, params.f_c, chain);
    if p_signal > opts.twpa_knee {
        return Err(OptomechError::TwpaSaturated {
            p_signal_w: p_signal.as_watts(),
            knee_w: opts.twpa_knee.as_watts(),
        });
    }
    let delta = match twpa {
        TwpaCorrection::Apply(tw) => tls::twpa_transmission(tw, t, p_signal, opts.extrapolate)?,
        TwpaCorrection::Disabled => 1.0,
    };
    let kappa_tot = params.kappa_tot(tls, t, p_in, opts.extrapolate)?;
    let gm = params.gamma_m_at(t, opts.extrapolate)?;
    let go = gamma_opt_at(params, kappa_tot, p_in);
    let g = g_opt_from(gamma_eff_from(scheme, gm, go), gm)?;
    let m = conversion_m_at(params, kappa_tot);
    let a_sdb = a_chip / delta;
    Ok(PhononArea {
        a_ph: a_sdb / (g * m * p_in.as_watts()),
        a_sdb,
        g_opt: g,
        m,
        delta,
        kappa_tot,
        p_signal_twpa: p_signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tls_params() -> TlsLossParams {
        TlsLossParams {
            f_c: Frequency::hz(5.154e9),
            kappa_tls0: AngularRate::two_pi_hz(660e3),
            p_cav0: TempTable::new(vec![(0.004, 1e-13), (0.4, 2e-12)]).unwrap(),
            kappa_dielec0: AngularRate::two_pi_hz(270e3),
            alpha: AngularRate::two_pi_hz(1.5e10),
            t_c: Temperature::kelvin(1.2),
        }
    }

    /// κ_tot pinned at 2π·450 kHz: no TLS, no quasiparticles.
    fn flat_tls() -> TlsLossParams {
        TlsLossParams {
            kappa_tls0: AngularRate::rad_per_s(0.0),
            alpha: AngularRate::rad_per_s(0.0),
            ..tls_params()
        }
    }

    fn device() -> OptomechParams {
        OptomechParams {
            omega_m: AngularRate::two_pi_hz(15.13e6),
            gamma_m: TempTable::new(vec![(0.004, 2.0 * std::f64::consts::PI * 420.0), (0.4, 2.0 * std::f64::consts::PI * 700.0)])
                .unwrap(),
            g0: AngularRate::two_pi_hz(220.0),
            f_c: Frequency::hz(5.154e9),
            kappa_ext: AngularRate::two_pi_hz(180e3),
            branch: CouplingBranch::Undercoupled,
        }
    }

    const T20: Temperature = Temperature::kelvin(0.02);

    #[test]
    fn zero_power_gives_no_backaction() {
        let go = gamma_opt(&device(), &tls_params(), T20, Power::watts(0.0), false).unwrap();
        assert_eq!(go.as_rad_per_s(), 0.0);
        let g = g_opt(PumpScheme::Blue, &device(), &tls_params(), T20, Power::watts(0.0), false).unwrap();
        assert_eq!(g, 1.0);
        let s = gamma_eff(PumpScheme::Red, &device(), &tls_params(), T20, Power::watts(0.0), false).unwrap();
        assert_eq!(s.gamma_eff(), Some(device().gamma_m_at(T20, false).unwrap()));
    }

    #[test]
    fn gamma_opt_two_forms_agree() {
        let d = device();
        let p = Power::watts(2.5e-12);
        let kt = d.kappa_tot(&tls_params(), T20, p, false).unwrap();
        let full = gamma_opt_at(&d, kt, p).as_rad_per_s();
        // resolved-sideband form: 4 g0² κ_ext P / (κ_tot ħ ω_c Ω_m²), written out independently
        let g0 = 2.0 * std::f64::consts::PI * 220.0;
        let ke = 2.0 * std::f64::consts::PI * 180e3;
        let om = 2.0 * std::f64::consts::PI * 15.13e6;
        let wc = 2.0 * std::f64::consts::PI * 5.154e9;
        let hbar = 6.62607015e-34 / (2.0 * std::f64::consts::PI);
        let kt = kt.as_rad_per_s();
        let resolved = 4.0 * g0 * g0 * ke * 2.5e-12 / (kt * hbar * wc * om * om);
        let bound = (kt / (2.0 * om)).powi(2);
        assert!(bound < 3e-4);
        assert!((resolved / full - 1.0).abs() <= bound * 1.0001, "{resolved} vs {full}");
        assert!(resolved > full);
    }

    #[test]
    fn blue_and_red_slopes_mirror() {
        let d = device();
        let tls = tls_params();
        for p in [1e-13, 1e-12, 5e-12] {
            let p = Power::watts(p);
            let gm = d.gamma_m_at(T20, false).unwrap().as_rad_per_s();
            let b = gamma_eff(PumpScheme::Blue, &d, &tls, T20, p, false).unwrap().gamma_eff().unwrap();
            let r = gamma_eff(PumpScheme::Red, &d, &tls, T20, p, false).unwrap().gamma_eff().unwrap();
            assert_eq!((b.as_rad_per_s() - gm).abs(), (r.as_rad_per_s() - gm).abs());
            assert!(r.as_rad_per_s() > gm);
        }
    }

    #[test]
    fn gain_at_half_threshold() {
        let gm = AngularRate::rad_per_s(100.0);
        let half = AngularRate::rad_per_s(50.0);
        assert_eq!(g_opt_from(gamma_eff_from(PumpScheme::Blue, gm, half), gm).unwrap(), 2.0);
        assert_relative_eq!(g_opt_from(gamma_eff_from(PumpScheme::Red, gm, half), gm).unwrap(), 2.0 / 3.0);
        let at = gamma_eff_from(PumpScheme::Blue, gm, gm);
        assert!(at.is_self_oscillating());
        assert!(matches!(g_opt_from(at, gm), Err(OptomechError::SelfOscillating { .. })));
    }

    #[test]
    fn threshold_matches_gamma_m() {
        let d = device();
        let tls = tls_params();
        let p = self_oscillation_threshold(&d, &tls, T20, false).unwrap();
        let go = gamma_opt(&d, &tls, T20, p, false).unwrap();
        assert_relative_eq!(go.as_rad_per_s(), d.gamma_m_at(T20, false).unwrap().as_rad_per_s(), max_relative = 1e-9);
        assert!(p.as_watts() > 1e-11 && p.as_watts() < 1e-10, "{p}");
    }

    #[test]
    fn conversion_factor_scalings() {
        let d = device();
        let m1 = conversion_m_at(&d, AngularRate::two_pi_hz(450e3));
        let m2 = conversion_m_at(&d, AngularRate::two_pi_hz(900e3));
        assert_relative_eq!(m2 / m1, 0.25, max_relative = 1e-14);
        let over = OptomechParams {
            kappa_ext: AngularRate::two_pi_hz(270e3),
            branch: CouplingBranch::Overcoupled,
            ..d.clone()
        };
        let m_over = conversion_m_at(&over, AngularRate::two_pi_hz(450e3));
        assert_relative_eq!(m1 / m_over, 4.0 / 9.0, max_relative = 1e-14);
    }

    #[test]
    fn conversion_factor_of_the_device() {
        // independent evaluation, SI 2019 constants, all angular rates 2π·f
        let two_pi = 2.0 * std::f64::consts::PI;
        let hbar = 6.62607015e-34 / two_pi;
        let (g0, ke, kt, om, wc) = (220.0 * two_pi, 180e3 * two_pi, 450e3 * two_pi, 15.13e6 * two_pi, 5.154e9 * two_pi);
        let oracle = 4.0 * g0.powi(2) * ke.powi(2) / (hbar * om.powi(2) * wc * kt.powi(2));
        let got = conversion_m_at(&device(), AngularRate::two_pi_hz(450e3));
        assert_relative_eq!(got, oracle, max_relative = 1e-13);
        // ≈ 3.96e13 per W·s
        assert!((got / 3.96e13 - 1.0).abs() < 0.01, "{got}");
    }

    #[test]
    fn bose_einstein_points() {
        // ħΩ/k_B T = ln 2 ⇒ exactly one phonon
        let om = AngularRate::two_pi_hz(15.13e6);
        let t = Temperature::kelvin(HBAR * om.as_rad_per_s() / (BOLTZMANN * 2f64.ln()));
        assert_relative_eq!(bose_einstein(om, t), 1.0, max_relative = 1e-12);
        let n4 = bose_einstein(om, Temperature::kelvin(0.004));
        assert!((n4 / 5.0 - 1.0).abs() < 0.02, "{n4}");
        let t400 = Temperature::kelvin(0.4);
        let high_t = BOLTZMANN * 0.4 / (HBAR * om.as_rad_per_s());
        let n400 = bose_einstein(om, t400);
        // n ≈ k_B T/ħΩ − 1/2
        assert!((n400 / high_t - 1.0).abs() < 1e-3, "{n400} vs {high_t}");
    }

    #[test]
    fn asymmetry_flag() {
        assert_eq!(sideband_phonons(0.0, PumpScheme::Blue, true), 1.0);
        assert_eq!(sideband_phonons(0.0, PumpScheme::Red, true), 0.0);
        assert_eq!(sideband_phonons(3.0, PumpScheme::Blue, false), 3.0);
    }

    fn forward_area(n: f64, scheme: PumpScheme, t: Temperature, p: Power, chain: &ChainCal, delta: f64) -> f64 {
        let d = device();
        let tls = tls_params();
        let g = g_opt(scheme, &d, &tls, t, p, false).unwrap();
        let m = conversion_m(&d, &tls, t, p, false).unwrap();
        n * m * p.as_watts() * g * delta * chain.detection_gain().linear()
    }

    #[test]
    fn phonon_area_inverts_the_forward_chain() {
        let chain = ChainCal::new(60.0, 70.0);
        let t = Temperature::kelvin(0.1);
        let p = Power::watts(2.5e-12);
        let tw = TwpaTlsParams {
            f_ref: Frequency::hz(5.154e9),
            lambda0: 0.4,
            beta: 1.0,
            p_twpa0: TempTable::constant(0.1, 3e-17),
        };
        for scheme in [PumpScheme::Blue, PumpScheme::Red] {
            let n = bose_einstein(device().omega_m, t);
            let delta_guess = 1.0 - tw.lambda(t);
            let a = forward_area(n, scheme, t, p, &chain, delta_guess);
            let out = phonon_area(a, scheme, t, p, &device(), &tls_params(), TwpaCorrection::Apply(&tw), &chain, &Default::default())
                .unwrap();
            // the signal is far below P⁰ so δ ≈ 1 − λ
            assert!((out.a_ph / n - 1.0).abs() < 1e-3, "{}", out.a_ph / n);
            let raw = phonon_area(a, scheme, t, p, &device(), &tls_params(), TwpaCorrection::Disabled, &chain, &Default::default())
                .unwrap();
            assert_relative_eq!(raw.a_ph / out.a_ph, out.delta, max_relative = 1e-12);
        }
    }

    #[test]
    fn saturated_signal_refused() {
        let chain = ChainCal::new(60.0, 0.0);
        let huge = 1e-15 / (HBAR * 2.0 * std::f64::consts::PI * 5.154e9);
        let err = phonon_area(
            huge,
            PumpScheme::Red,
            T20,
            Power::watts(1e-12),
            &device(),
            &tls_params(),
            TwpaCorrection::Disabled,
            &chain,
            &Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OptomechError::TwpaSaturated { .. }));
    }

    #[test]
    fn flat_kappa_gives_device_numbers() {
        let d = device();
        let kt = d.kappa_tot(&flat_tls(), T20, Power::watts(1e-12), false).unwrap();
        assert_relative_eq!(kt.as_hz(), 450e3, max_relative = 1e-12);
        assert!(d.is_sideband_resolved(kt));
    }

    proptest! {
        #[test]
        fn chain_rescaling_invariance(shift in -20.0f64..20.0, lp in -13.0f64..-11.5) {
            let t = Temperature::kelvin(0.05);
            let p = Power::watts(10f64.powf(lp));
            let chain = ChainCal::new(60.0, 70.0);
            let shifted = ChainCal { detection_gain_db: 70.0 + shift, ..chain };
            let a = 1e5;
            let a_shift = a * 10f64.powf(shift / 10.0);
            let run = |area: f64, c: &ChainCal| {
                phonon_area(area, PumpScheme::Red, t, p, &device(), &tls_params(), TwpaCorrection::Disabled, c, &Default::default()).unwrap().a_ph
            };
            let x = run(a, &chain);
            let y = run(a_shift, &shifted);
            prop_assert!((x - y).abs() <= 1e-12 * x);
        }

        #[test]
        fn branch_swap_scales_by_kappa_ratio_squared(lp in -13.0f64..-11.0) {
            let t = Temperature::kelvin(0.05);
            let p = Power::watts(10f64.powf(lp));
            let chain = ChainCal::new(60.0, 70.0);
            let under = device();
            let kt = under.kappa_tot(&tls_params(), t, p, false).unwrap();
            let k_in = kt - under.kappa_ext;
            let over = OptomechParams { kappa_ext: k_in, branch: CouplingBranch::Overcoupled, ..under.clone() };
            // hold κ_tot fixed across the swap
            let mut tls_over = tls_params();
            tls_over.kappa_dielec0 = tls_over.kappa_dielec0 + under.kappa_ext - k_in;
            let run = |d: &OptomechParams, tl: &TlsLossParams| {
                phonon_area(1e5, PumpScheme::Red, t, p, d, tl, TwpaCorrection::Disabled, &chain, &Default::default()).unwrap()
            };
            let a = run(&under, &tls_params());
            let b = run(&over, &tls_over);
            prop_assert!((a.kappa_tot.as_rad_per_s() / b.kappa_tot.as_rad_per_s() - 1.0).abs() < 1e-12);
            // G_opt also moves through Γ_opt ∝ κ_ext; isolate M
            let ratio = (a.a_ph * a.g_opt) / (b.a_ph * b.g_opt);
            let expect = (k_in.as_rad_per_s() / under.kappa_ext.as_rad_per_s()).powi(2);
            prop_assert!((ratio / expect - 1.0).abs() < 1e-10);
        }
    }
}
