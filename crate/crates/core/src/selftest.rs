//! Embedded invariant suite: symmetries, limits and round trips that must
//! hold on any correct build.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cavity::{self, fit_reflection, CavityParams, CouplingBranch, ReflectionFitOptions, ReflectionTrace};
use crate::fit::{numeric_jacobian, solve, FitProblem, SolveOptions, StepPolicy};
use crate::optomech::{self, PumpScheme};
use crate::peak::{lorentzian, lorentzian_partials};
use crate::pipeline::{run_calibration, CalibrationConfig};
use crate::synth::{self, ScenarioConfig};
use crate::tls::{self, KappaPoint, TlsFitOptions, TransmissionPoint};
use crate::units::{AngularRate, Frequency, Power, Temperature, BOLTZMANN, PLANCK};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Physical constants the suite checks the library against.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub planck: f64,
    pub boltzmann: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            planck: PLANCK,
            boltzmann: BOLTZMANN,
        }
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn swap_symmetry() -> Check {
    let mut worst: f64 = 0.0;
    for (ke, ki) in [(180e3, 270e3), (600e3, 150e3), (50e3, 900e3)] {
        let p = CavityParams::from_hz(5.154e9, ke, ki).expect("valid");
        let q = p.swapped();
        for df in [-2e6, -3e5, 0.0, 1e5, 4e5, 3e6] {
            let f = Frequency::hz(5.154e9 + df);
            worst = worst.max((cavity::s11_db(&p, f) - cavity::s11_db(&q, f)).abs());
        }
    }
    check("s11 branch swap symmetry", worst < 1e-9, format!("max |Δ dB| = {worst:.2e}"))
}

fn tanh_limits(c: &Constants) -> Check {
    let f = Frequency::hz(5.154e9);
    let x = |t: f64| c.planck * f.as_hz() / (2.0 * c.boltzmann * t);
    let mid = tls::tanh_factor(f, Temperature::kelvin(0.15));
    let cold = tls::tanh_factor(f, Temperature::kelvin(1e-3));
    let hot = tls::tanh_factor(f, Temperature::kelvin(10.0));
    let consistent = rel(mid, x(0.15).tanh()) < 1e-12;
    let low = (cold - 1.0).abs() < 1e-12;
    let high = rel(hot, x(10.0)) < 1e-3;
    let anchor = (mid - 0.677_517_091_628_019_8).abs() < 1e-9;
    check(
        "tanh factor limits",
        consistent && low && high && anchor,
        format!("tanh(150 mK) = {mid:.12}, T→0: {cold:.3e}, high-T ratio {:.6}", hot / x(10.0)),
    )
}

fn bose_einstein() -> Check {
    let om = AngularRate::two_pi_hz(15.13e6);
    let n4 = optomech::bose_einstein(om, Temperature::kelvin(0.004));
    let n400 = optomech::bose_einstein(om, Temperature::kelvin(0.4));
    let ok = rel(n4, 5.023_809_100_176_607) < 1e-9 && rel(n400, 550.369_130_081_884_8) < 1e-9;
    check("thermal occupation anchors", ok, format!("n(4 mK) = {n4:.6}, n(400 mK) = {n400:.3}"))
}

fn jacobian_vs_analytic() -> Check {
    let (c, w, a) = (120.0, 420.0, 5.0e3);
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 37.0).collect();
    let f = |p: &[f64]| xs.iter().map(|&x| lorentzian(x, p[0], p[1], p[2])).collect::<Vec<_>>();
    let p = [c, w, a];
    let jac = numeric_jacobian(&f, &p, &[-1e9; 3], &[f64::INFINITY; 3], &[w, w, a], StepPolicy::default()).expect("finite");
    let mut worst: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let an = lorentzian_partials(x, c, w, a);
        for j in 0..3 {
            let scale = an[j].abs().max(1e-8 * jac.column(j).amax());
            worst = worst.max((jac[(i, j)] - an[j]).abs() / scale);
        }
    }
    check("lorentzian jacobian", worst < 1e-5, format!("max relative deviation {worst:.2e}"))
}

fn linear_least_squares() -> Check {
    let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.3 - 4.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 + 1.3 * x - 0.2 * x * x + 0.05 * (5.1 * x).cos()).collect();
    let prob = FitProblem::new(
        |p: &[f64]| xs.iter().zip(&ys).map(|(x, y)| p[0] + p[1] * x + p[2] * x * x - y).collect(),
        vec![0.0; 3],
    );
    let Ok(fit) = solve(&prob, &SolveOptions::default()) else {
        return check("linear least squares", false, "solver failed".into());
    };
    let design = DMatrix::from_fn(xs.len(), 3, |i, j| xs[i].powi(j as i32));
    let exact = (design.transpose() * &design)
        .cholesky()
        .expect("full rank")
        .solve(&(design.transpose() * DVector::from_column_slice(&ys)));
    let worst = (0..3).map(|j| rel(fit.params[j], exact[j])).fold(0.0, f64::max);
    check("linear least squares", worst < 1e-10, format!("max relative deviation {worst:.2e}"))
}

fn reflection_round_trip() -> Check {
    let truth = CavityParams::from_hz(5.154e9, 180e3, 270e3).expect("valid");
    let freq = cavity::linear_grid(5.154e9, 6.0 * 450e3, 401);
    let trace = ReflectionTrace::from_model(&truth, freq).expect("valid");
    match fit_reflection(&trace, None, &ReflectionFitOptions::default()) {
        Ok(fit) => {
            let p = fit.params(CouplingBranch::Undercoupled);
            let e = rel(p.kappa_ext.as_hz(), 180e3).max(rel(fit.kappa_tot().as_hz(), 450e3));
            check("reflection round trip", e < 1e-6, format!("max relative error {e:.2e}"))
        }
        Err(e) => check("reflection round trip", false, e.to_string()),
    }
}

fn tls_round_trips(sc: &ScenarioConfig) -> Vec<Check> {
    let dev = &sc.device;
    let tls_p = dev.tls().expect("valid");
    let twpa_p = dev.twpa().expect("valid");
    let ke = AngularRate::two_pi_hz(dev.kappa_ext_hz);
    let temps = [0.004, 0.05, 0.1, 0.2, 0.4];
    let mut kp = Vec::new();
    let mut tp = Vec::new();
    for &t in &temps {
        let t = Temperature::kelvin(t);
        for i in 0..12 {
            let p = Power::watts(1e-15 * 10f64.powf(i as f64 * 0.5));
            let ki = tls::kappa_in(&tls_p, t, p, false).expect("in range");
            kp.push(KappaPoint { t, p_in: p, kappa_tot: ke + ki });
        }
        if t.as_kelvin() != 0.2 {
            for i in 0..20 {
                let p = Power::watts(1e-20 * 10f64.powf(i as f64 * 0.4));
                let d = tls::twpa_transmission(&twpa_p, t, p, false).expect("in range");
                tp.push(TransmissionPoint { t, p_in: p, delta: d });
            }
        }
    }
    let cav = match tls::fit_tls_cavity(&kp, ke, tls_p.f_c, &TlsFitOptions::default()) {
        Ok(f) => {
            let e = rel(f.params.kappa_tls0.as_hz(), dev.kappa_tls0_hz).max(rel(f.params.kappa_dielec0.as_hz(), dev.kappa_dielec0_hz));
            check("cavity TLS round trip", e < 1e-4, format!("max relative error {e:.2e}"))
        }
        Err(e) => check("cavity TLS round trip", false, e.to_string()),
    };
    let tw = match tls::fit_tls_twpa(&tp, twpa_p.f_ref, &SolveOptions::default()) {
        Ok(f) => {
            let e = rel(f.params.lambda0, dev.lambda0).max(rel(f.params.beta, dev.beta));
            check("TWPA TLS round trip", e < 1e-4, format!("max relative error {e:.2e}"))
        }
        Err(e) => check("TWPA TLS round trip", false, e.to_string()),
    };
    vec![cav, tw]
}

fn threshold(sc: &ScenarioConfig) -> Check {
    let om = sc.device.optomech().expect("valid");
    let tls_p = sc.device.tls().expect("valid");
    let t = Temperature::kelvin(0.02);
    match optomech::self_oscillation_threshold(&om, &tls_p, t, false) {
        Ok(p) => {
            let g = |x: f64| optomech::gamma_eff(PumpScheme::Blue, &om, &tls_p, t, Power::watts(p.as_watts() * x), false);
            let below = g(0.99).map(|s| s.gamma_eff().is_some()).unwrap_or(false);
            let above = g(1.01).map(|s| s.is_self_oscillating()).unwrap_or(false);
            check("self-oscillation threshold", below && above, format!("P_th = {:.4e} W", p.as_watts()))
        }
        Err(e) => check("self-oscillation threshold", false, e.to_string()),
    }
}

fn end_to_end(sc: &ScenarioConfig) -> Vec<Check> {
    let ds = match synth::synthesize(sc).map_err(|e| e.to_string()).and_then(|s| s.to_dataset().map_err(|e| e.to_string())) {
        Ok(d) => d,
        Err(e) => return vec![check("replica calibration", false, e)],
    };
    let cfg = CalibrationConfig {
        mc_samples: 200,
        ..CalibrationConfig::default()
    };
    let a = run_calibration(&ds, &cfg);
    let b = run_calibration(&ds, &cfg);
    let e2e = match (&a.failure, &a.summary, a.chosen_branch()) {
        (None, Some(s), Some(br)) => {
            let g0 = a.g0_for(br).map_or(f64::NAN, |g| g.estimate.g0_hz);
            let ok = br == sc.device.branch() && (s.ratio_mean - 1.0).abs() < 0.05 && rel(g0, sc.device.g0_hz) < 0.02;
            check(
                "replica calibration",
                ok,
                format!("{br:?}, mean A_ph/n_ph = {:.3}, g0/2π = {g0:.2} Hz", s.ratio_mean),
            )
        }
        (Some(f), _, _) => check("replica calibration", false, format!("{:?}: {}", f.stage, f.message)),
        _ => check("replica calibration", false, "incomplete report".into()),
    };
    let same = a.to_json() == b.to_json();
    vec![e2e, check("calibration reproducible", same, if same { "identical reports".into() } else { "reports differ".into() })]
}

/// Run the suite.
pub fn run() -> SelftestReport {
    run_with(&Constants::default())
}

#[doc(hidden)]
pub fn run_with(constants: &Constants) -> SelftestReport {
    let sc = ScenarioConfig::paper_replica();
    let mut checks = vec![
        swap_symmetry(),
        tanh_limits(constants),
        bose_einstein(),
        jacobian_vs_analytic(),
        linear_least_squares(),
        reflection_round_trip(),
    ];
    checks.extend(tls_round_trips(&sc));
    checks.push(threshold(&sc));
    checks.extend(end_to_end(&sc));
    SelftestReport { checks }
}
