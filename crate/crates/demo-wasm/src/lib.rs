//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export returns one flat `Float64Array`; the layout is given per
//! function. Rates are `κ/2π` in kHz, powers in watts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use optocal::cavity::{s11_db, CavityParams};
use optocal::tls::{kappa_in, twpa_transmission, TempTable, TlsLossParams, TwpaTlsParams};
use optocal::units::{AngularRate, Frequency, Power, Temperature};
use wasm_bindgen::prelude::*;

/// Quasiparticle damping is switched off (α = 0); T_c only has to be valid.
const T_C_K: f64 = 1.2;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// `[detuning_khz; n] ++ [S11 dB; n] ++ [S11 dB with κ_ext ↔ κ_in; n]`.
pub fn s11_curve_impl(f_c_ghz: f64, kappa_ext_khz: f64, kappa_in_khz: f64, n: usize) -> Result<Vec<f64>, String> {
    let n = n.max(2);
    let p = CavityParams::from_hz(f_c_ghz * 1e9, kappa_ext_khz * 1e3, kappa_in_khz * 1e3).map_err(|e| e.to_string())?;
    let q = p.swapped();
    let half = 3.0 * (kappa_ext_khz + kappa_in_khz);
    let det: Vec<f64> = (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect();
    let at = |c: &CavityParams, d: f64| s11_db(c, Frequency::hz(f_c_ghz * 1e9 + d * 1e3));
    let mut out = det.clone();
    out.extend(det.iter().map(|&d| at(&p, d)));
    out.extend(det.iter().map(|&d| at(&q, d)));
    Ok(out)
}

/// `[P_in (W); n] ++ [κ_tot kHz; n]` over `p_lo..p_hi`, log spaced.
#[allow(clippy::too_many_arguments)]
pub fn kappa_vs_power_impl(
    t_mk: f64,
    kappa_ext_khz: f64,
    kappa_tls0_khz: f64,
    kappa_dielec0_khz: f64,
    p_cav0_w: f64,
    p_lo_w: f64,
    p_hi_w: f64,
    n: usize,
) -> Result<Vec<f64>, String> {
    if !(t_mk > 0.0 && p_cav0_w > 0.0 && p_lo_w > 0.0 && p_hi_w > p_lo_w) {
        return Err("temperature and powers must be positive, with p_hi > p_lo".into());
    }
    let params = TlsLossParams {
        f_c: Frequency::hz(5.0e9),
        kappa_tls0: AngularRate::two_pi_hz(kappa_tls0_khz * 1e3),
        p_cav0: TempTable::constant(t_mk * 1e-3, p_cav0_w),
        kappa_dielec0: AngularRate::two_pi_hz(kappa_dielec0_khz * 1e3),
        alpha: AngularRate::two_pi_hz(0.0),
        t_c: Temperature::kelvin(T_C_K),
    };
    params.validate().map_err(|e| e.to_string())?;
    let t = Temperature::kelvin(t_mk * 1e-3);
    let powers = log_grid(p_lo_w, p_hi_w, n);
    let mut kappa = Vec::with_capacity(powers.len());
    for &p in &powers {
        let ki = kappa_in(&params, t, Power::watts(p), true).map_err(|e| e.to_string())?;
        kappa.push(kappa_ext_khz + ki.as_hz() * 1e-3);
    }
    let mut out = powers;
    out.extend(kappa);
    Ok(out)
}

/// `[T (mK); n] ++ [δ; n]` for 4-400 mK. Without the TWPA correction the
/// calibrated `A_ph/n_ph` follows `δ`.
pub fn twpa_delta_vs_t_impl(lambda0: f64, beta: f64, p_twpa0_w: f64, p_signal_w: f64, n: usize) -> Result<Vec<f64>, String> {
    if !(p_signal_w > 0.0) {
        return Err("signal power must be positive".into());
    }
    let params = TwpaTlsParams {
        f_ref: Frequency::hz(5.0e9),
        lambda0,
        beta,
        p_twpa0: TempTable::constant(0.02, p_twpa0_w),
    };
    params.validate().map_err(|e| e.to_string())?;
    let temps = log_grid(4e-3, 0.4, n);
    let mut delta = Vec::with_capacity(temps.len());
    for &t in &temps {
        delta.push(twpa_transmission(&params, Temperature::kelvin(t), Power::watts(p_signal_w), true).map_err(|e| e.to_string())?);
    }
    let mut out: Vec<f64> = temps.iter().map(|t| t * 1e3).collect();
    out.extend(delta);
    Ok(out)
}

#[wasm_bindgen]
pub fn s11_curve(f_c_ghz: f64, kappa_ext_khz: f64, kappa_in_khz: f64, n: usize) -> Result<Vec<f64>, JsError> {
    s11_curve_impl(f_c_ghz, kappa_ext_khz, kappa_in_khz, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn kappa_vs_power(
    t_mk: f64,
    kappa_ext_khz: f64,
    kappa_tls0_khz: f64,
    kappa_dielec0_khz: f64,
    p_cav0_w: f64,
    p_lo_w: f64,
    p_hi_w: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    kappa_vs_power_impl(t_mk, kappa_ext_khz, kappa_tls0_khz, kappa_dielec0_khz, p_cav0_w, p_lo_w, p_hi_w, n)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn twpa_delta_vs_t(lambda0: f64, beta: f64, p_twpa0_w: f64, p_signal_w: f64, n: usize) -> Result<Vec<f64>, JsError> {
    twpa_delta_vs_t_impl(lambda0, beta, p_twpa0_w, p_signal_w, n).map_err(|e| JsError::new(&e))
}
