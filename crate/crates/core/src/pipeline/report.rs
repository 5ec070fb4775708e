//! Calibration report schema and its on-disk forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cavity::CouplingBranch;
use crate::dataset::{Scheme, TwpaPump};
use crate::fit::McSummary;

use super::g0::G0Estimate;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Non-finite floats are written as `null` and read back as NaN.
pub mod lenient {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
pub const REPORT_FILE: &str = "report.json";

/// A value with its 1σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "lenient")]
    pub value: f64,
    #[serde(with = "lenient")]
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }
}

/// A Monte-Carlo propagated value: nominal result and central 95 % interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "lenient")]
    pub value: f64,
    #[serde(with = "lenient")]
    pub lo95: f64,
    #[serde(with = "lenient")]
    pub hi95: f64,
}

impl Interval {
    pub fn from_mc(value: f64, s: &McSummary) -> Self {
        Self {
            value,
            lo95: s.p2_5,
            hi95: s.p97_5,
        }
    }

    pub fn rel_half_width(&self) -> f64 {
        0.5 * (self.hi95 - self.lo95) / self.value.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Cavity,
    CavityTls,
    TwpaTls,
    Peaks,
    G0,
    Phonon,
    Branch,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notice {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub twpa_correction: bool,
    pub asymmetry: bool,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub run_id: String,
    pub t_k: f64,
    pub p_in_w: f64,
    pub f_c_hz: Estimate,
    /// `κ/2π` values in Hz.
    pub kappa_tot_hz: Estimate,
    pub kappa_ext_overcoupled_hz: Estimate,
    pub kappa_ext_undercoupled_hz: Estimate,
    /// Residual sum of squares, dB², for each branch.
    pub ssr_overcoupled: f64,
    pub ssr_undercoupled: f64,
    pub advisory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceP0 {
    pub t_k: f64,
    pub p0_w: Estimate,
    #[serde(with = "lenient")]
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityTlsResult {
    pub branch: CouplingBranch,
    pub kappa_ext_hz: Estimate,
    pub f_c_hz: f64,
    pub kappa_tls0_hz: Estimate,
    pub kappa_dielec0_hz: Estimate,
    pub alpha_hz: Estimate,
    pub t_c_k: Estimate,
    pub bcs_fitted: bool,
    pub p_cav0: Vec<SliceP0>,
    #[serde(with = "lenient")]
    pub residual_norm: f64,
    pub advisory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRow {
    pub t_k: f64,
    pub p_twpa_w: f64,
    pub twpa_pump: TwpaPump,
    /// Measured transmission; TWPA-on scans are divided by their gain.
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_model: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwpaGain {
    pub t_k: f64,
    pub gain_db: f64,
    /// Lowest input power where the gain-normalized transmission falls 1 dB
    /// below the pump-off scan.
    pub compression_1db_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwpaTlsResult {
    pub lambda0: Estimate,
    pub beta: Estimate,
    pub p_twpa0: Vec<SliceP0>,
    #[serde(with = "lenient")]
    pub residual_norm: f64,
    pub advisory: bool,
    pub gains: Vec<TwpaGain>,
    pub points: Vec<TransmissionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakResult {
    pub run_id: String,
    pub t_k: f64,
    pub scheme: Scheme,
    pub p_in_w: f64,
    pub center_hz: Estimate,
    pub fwhm_hz: Estimate,
    /// Recorded photons/s.
    pub area: Estimate,
    #[serde(with = "lenient")]
    pub trapezoid_area: f64,
    #[serde(with = "lenient")]
    pub snr: f64,
    pub low_confidence: bool,
    pub methods_agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchG0 {
    pub branch: CouplingBranch,
    pub t_k: f64,
    pub estimate: G0Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    pub branch: CouplingBranch,
    /// Median `A_ph/n_ph` over the high-temperature runs.
    #[serde(with = "lenient")]
    pub high_t_ratio: f64,
    pub n_runs: usize,
    /// Sum over sweeps of the reflection residuals, dB².
    #[serde(with = "lenient")]
    pub sweep_ssr: f64,
    #[serde(with = "lenient")]
    pub tls_residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDecision {
    pub chosen: CouplingBranch,
    pub ambiguous: bool,
    pub high_t_min_k: f64,
    pub candidates: Vec<BranchCandidate>,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhononResult {
    pub run_id: String,
    pub t_k: f64,
    pub scheme: Scheme,
    pub p_in_w: f64,
    pub a_ph: Interval,
    pub n_ph: Interval,
    pub ratio: Interval,
    #[serde(with = "lenient")]
    pub g_opt: f64,
    #[serde(with = "lenient")]
    pub conversion_m: f64,
    #[serde(with = "lenient")]
    pub delta: f64,
    #[serde(with = "lenient")]
    pub kappa_tot_hz: f64,
    #[serde(with = "lenient")]
    pub p_signal_w: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioAtT {
    pub t_k: f64,
    pub n_runs: usize,
    #[serde(with = "lenient")]
    pub mean: f64,
    /// Standard error of the mean from the run-to-run scatter.
    #[serde(with = "lenient")]
    pub std_err: f64,
    /// Median relative 95 % half width of the individual runs.
    #[serde(with = "lenient")]
    pub systematic_half_width: f64,
    #[serde(with = "lenient")]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_runs: usize,
    #[serde(with = "lenient")]
    pub ratio_mean: f64,
    /// `1.96 ×` relative standard deviation of `A_ph/n_ph` over runs at
    /// T ≥ 10 mK.
    #[serde(with = "lenient")]
    pub scatter_95: f64,
    /// Median relative 95 % half width of `A_ph` from the error budget alone.
    #[serde(with = "lenient")]
    pub error_budget_95: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phonons_at_base: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributingRuns {
    pub cavity_tls: Vec<String>,
    pub twpa_tls: Vec<String>,
    pub g0: Vec<String>,
    pub phonon: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    #[serde(with = "lenient")]
    pub truth: f64,
    #[serde(with = "lenient")]
    pub fitted: f64,
    #[serde(with = "lenient")]
    pub rel_error: f64,
}

impl Comparison {
    pub fn new(truth: f64, fitted: f64) -> Self {
        Self {
            truth,
            fitted,
            rel_error: fitted / truth - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthComparison {
    pub branch_truth: CouplingBranch,
    pub branch_chosen: Option<CouplingBranch>,
    pub values: BTreeMap<String, Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format_version: u32,
    pub provenance: Provenance,
    pub failure: Option<StageFailure>,
    pub notices: Vec<Notice>,
    pub cavity: Vec<SweepResult>,
    pub cavity_tls: Vec<CavityTlsResult>,
    pub twpa_tls: Option<TwpaTlsResult>,
    pub peaks: Vec<PeakResult>,
    pub g0: Vec<BranchG0>,
    pub branch: Option<BranchDecision>,
    pub runs: Vec<PhononResult>,
    pub ratio_vs_t: Vec<RatioAtT>,
    pub summary: Option<Summary>,
    pub contributing_runs: ContributingRuns,
    pub ground_truth: Option<GroundTruthComparison>,
}

impl CalibrationReport {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn chosen_branch(&self) -> Option<CouplingBranch> {
        self.branch.as_ref().map(|b| b.chosen)
    }

    pub fn cavity_tls_for(&self, branch: CouplingBranch) -> Option<&CavityTlsResult> {
        self.cavity_tls.iter().find(|c| c.branch == branch)
    }

    pub fn g0_for(&self, branch: CouplingBranch) -> Option<&BranchG0> {
        self.g0.iter().find(|g| g.branch == branch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn kappa_csv(&self) -> String {
        let mut s = String::from("t_k,p_in_w,kappa_tot_hz,kappa_tot_sigma_hz\n");
        for c in &self.cavity {
            let _ = writeln!(s, "{},{:e},{},{}", c.t_k, c.p_in_w, c.kappa_tot_hz.value, c.kappa_tot_hz.sigma);
        }
        s
    }

    pub fn delta_csv(&self) -> String {
        let mut s = String::from("t_k,p_twpa_w,twpa_pump,delta,delta_model\n");
        if let Some(tw) = &self.twpa_tls {
            for r in &tw.points {
                let pump = match r.twpa_pump {
                    TwpaPump::On => "on",
                    TwpaPump::Off => "off",
                };
                let model = r.delta_model.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{:e},{pump},{},{model}", r.t_k, r.p_twpa_w, r.delta);
            }
        }
        s
    }

    pub fn ratio_csv(&self) -> String {
        let mut s = String::from("run_id,t_k,scheme,p_in_w,a_ph,a_ph_lo95,a_ph_hi95,n_ph,ratio,ratio_lo95,ratio_hi95,delta\n");
        for r in &self.runs {
            let scheme = match r.scheme {
                Scheme::Blue => "blue",
                Scheme::Red => "red",
                Scheme::ProbeOnly => "probe_only",
            };
            let _ = writeln!(
                s,
                "{},{},{scheme},{:e},{},{},{},{},{},{},{},{}",
                r.run_id, r.t_k, r.p_in_w, r.a_ph.value, r.a_ph.lo95, r.a_ph.hi95, r.n_ph.value, r.ratio.value, r.ratio.lo95,
                r.ratio.hi95, r.delta
            );
        }
        s
    }

    /// Write `report.json` and the plot tables into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), self.to_json())?;
        std::fs::write(dir.join("kappa_vs_power.csv"), self.kappa_csv())?;
        std::fs::write(dir.join("delta_vs_power.csv"), self.delta_csv())?;
        std::fs::write(dir.join("aph_over_nph_vs_T.csv"), self.ratio_csv())?;
        Ok(())
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let p = &self.provenance;
        let _ = writeln!(
            s,
            "{} {}  seed {}  twpa correction {}  asymmetry {}",
            p.tool,
            p.version,
            p.seed,
            if p.twpa_correction { "on" } else { "off" },
            if p.asymmetry { "on" } else { "off" }
        );
        for c in &self.cavity_tls {
            let _ = writeln!(
                s,
                "{:?}: kappa_ext/2pi = {:.1} ± {:.1} kHz, kappa_TLS0 = {:.1} ± {:.1} kHz, kappa_dielec0 = {:.1} ± {:.1} kHz{}",
                c.branch,
                c.kappa_ext_hz.value * 1e-3,
                c.kappa_ext_hz.sigma * 1e-3,
                c.kappa_tls0_hz.value * 1e-3,
                c.kappa_tls0_hz.sigma * 1e-3,
                c.kappa_dielec0_hz.value * 1e-3,
                c.kappa_dielec0_hz.sigma * 1e-3,
                if c.advisory { " (advisory)" } else { "" }
            );
        }
        if let Some(tw) = &self.twpa_tls {
            let _ = writeln!(
                s,
                "TWPA: lambda0 = {:.4} ± {:.4}, beta = {:.3} ± {:.3}{}",
                tw.lambda0.value,
                tw.lambda0.sigma,
                tw.beta.value,
                tw.beta.sigma,
                if tw.advisory { " (advisory)" } else { "" }
            );
        }
        if let Some(b) = &self.branch {
            let _ = writeln!(s, "branch: {:?}{}", b.chosen, if b.ambiguous { " (ambiguous)" } else { "" });
            for c in &b.candidates {
                let _ = writeln!(s, "  {:?}: high-T A_ph/n_ph = {:.3} over {} runs", c.branch, c.high_t_ratio, c.n_runs);
            }
        }
        if let Some(g) = self.branch.as_ref().and_then(|b| self.g0_for(b.chosen)) {
            let _ = writeln!(s, "g0/2pi = {:.2} ± {:.2} Hz", g.estimate.g0_hz, g.estimate.g0_sigma_hz);
        }
        if !self.ratio_vs_t.is_empty() {
            let _ = writeln!(s, "{:>9}  {:>4}  {:>8}  {:>8}  {:>7}", "T (mK)", "runs", "A/n", "±95%", "delta");
            for r in &self.ratio_vs_t {
                let _ = writeln!(
                    s,
                    "{:>9.1}  {:>4}  {:>8.3}  {:>8.3}  {:>7.3}",
                    r.t_k * 1e3,
                    r.n_runs,
                    r.mean,
                    r.systematic_half_width * r.mean,
                    r.delta
                );
            }
        }
        if let Some(sm) = &self.summary {
            let _ = writeln!(
                s,
                "scatter ±{:.1}%  error budget ±{:.1}%",
                100.0 * sm.scatter_95,
                100.0 * sm.error_budget_95
            );
            if let Some(b) = &sm.phonons_at_base {
                let _ = writeln!(s, "lowest T: A_ph = {:.2} [{:.2}, {:.2}]", b.value, b.lo95, b.hi95);
            }
        }
        let _ = writeln!(s, "notices: {}", self.notices.len());
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "FAILED at {:?}: {}", f.stage, f.message);
        }
        s
    }
}
