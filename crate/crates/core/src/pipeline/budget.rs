//! Monte-Carlo error budget of the phonon scale.

use serde::{Deserialize, Serialize};

use crate::fit::{monte_carlo_propagate, FitError, InputDistribution, McSummary};
use crate::optomech::{self, OptomechError, PumpScheme};
use crate::units::{AngularRate, Frequency, Temperature, HBAR};

/// Input uncertainties, each read as "within ±x" (uniform).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorBudget {
    pub g0_frac: f64,
    pub kappa_ext_frac: f64,
    pub kappa_tot_frac: f64,
    /// Net calibration of the whole chain, dB.
    pub chain_db: f64,
}

impl Default for ErrorBudget {
    fn default() -> Self {
        Self {
            g0_frac: 0.05,
            kappa_ext_frac: 0.05,
            kappa_tot_frac: 0.05,
            chain_db: 1.0,
        }
    }
}

/// Everything `A_ph` depends on, at one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhononInputs {
    /// De-embedded, TWPA-corrected area on chip, photons/s.
    pub a_sdb: f64,
    pub p_in_w: f64,
    pub g0: AngularRate,
    pub kappa_ext: AngularRate,
    pub kappa_tot: AngularRate,
    pub omega_m: AngularRate,
    pub gamma_m: AngularRate,
    pub f_c: Frequency,
    pub scheme: PumpScheme,
}

/// `A_ph = A_sdb / (G_opt · M · P_in)` from explicit rates.
pub fn phonons_from(x: &PhononInputs) -> Result<f64, OptomechError> {
    let g0 = x.g0.as_rad_per_s();
    let ke = x.kappa_ext.as_rad_per_s();
    let kt = x.kappa_tot.as_rad_per_s();
    let om = x.omega_m.as_rad_per_s();
    let wc = x.f_c.to_angular().as_rad_per_s();
    let go = 4.0 * g0 * g0 / kt * ke * x.p_in_w / (HBAR * wc * (om * om + 0.25 * kt * kt));
    let state = optomech::gamma_eff_from(x.scheme, x.gamma_m, AngularRate::rad_per_s(go));
    let g = optomech::g_opt_from(state, x.gamma_m)?;
    let m = 4.0 * g0 * g0 * ke * ke / (HBAR * om * om * wc * kt * kt);
    Ok(x.a_sdb / (g * m * x.p_in_w))
}

fn inputs_for(budget: &ErrorBudget, area_rel_sd: f64) -> Vec<InputDistribution> {
    vec![
        InputDistribution::within(1.0, budget.g0_frac),
        InputDistribution::within(1.0, budget.kappa_ext_frac),
        InputDistribution::within(1.0, budget.kappa_tot_frac),
        InputDistribution::Uniform {
            lo: -budget.chain_db,
            hi: budget.chain_db,
        },
        InputDistribution::Normal {
            mean: 1.0,
            sd: area_rel_sd.max(0.0),
        },
    ]
}

fn perturbed(base: &PhononInputs, s: &[f64]) -> PhononInputs {
    PhononInputs {
        a_sdb: base.a_sdb * s[4] * 10f64.powf(s[3] / 10.0),
        g0: AngularRate::rad_per_s(base.g0.as_rad_per_s() * s[0]),
        kappa_ext: AngularRate::rad_per_s(base.kappa_ext.as_rad_per_s() * s[1]),
        kappa_tot: AngularRate::rad_per_s(base.kappa_tot.as_rad_per_s() * s[2]),
        ..*base
    }
}

/// Distribution of `A_ph` under the budget and the area's own noise.
pub fn propagate_phonons(
    base: &PhononInputs,
    budget: &ErrorBudget,
    area_rel_sd: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McSummary, FitError> {
    let inputs = inputs_for(budget, area_rel_sd);
    monte_carlo_propagate(|s| phonons_from(&perturbed(base, s)), &inputs, n_samples, seed)
}

/// Distribution of `A_ph / expected phonons`, including thermometry known
/// within `±t_frac`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_ratio(
    base: &PhononInputs,
    budget: &ErrorBudget,
    area_rel_sd: f64,
    t: Temperature,
    t_frac: f64,
    asymmetry: bool,
    n_samples: usize,
    seed: u64,
) -> Result<McSummary, FitError> {
    let mut inputs = inputs_for(budget, area_rel_sd);
    inputs.push(InputDistribution::within(t.as_kelvin(), t_frac));
    monte_carlo_propagate(
        |s| {
            let n = optomech::bose_einstein(base.omega_m, Temperature::kelvin(s[5]));
            let expected = optomech::sideband_phonons(n, base.scheme, asymmetry);
            phonons_from(&perturbed(base, s)).map(|a| a / expected)
        },
        &inputs,
        n_samples,
        seed,
    )
}
