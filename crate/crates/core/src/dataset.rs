//! Dataset manifest, CSV trace formats and ingestion.
//!
//! A dataset is a directory holding `manifest.toml` and one CSV file per run.
//! Powers are normalized to watts at the boundary; everything downstream sees
//! typed values only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cavity::{CouplingBranch, ReflectionTrace};
use crate::optomech::{OptomechParams, DEFAULT_TWPA_KNEE_W};
use crate::peak::Spectrum;
use crate::tls::{TempTable, TlsLossParams, TwpaTlsParams};
use crate::units::{AngularRate, ChainCal, Frequency, Power, ReferencePlane, Temperature};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("run `{run}`, field `{field}`: {message}")]
    Schema { run: String, field: String, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("runs `{first}` and `{second}` share the key {key}")]
    Duplicate { first: String, second: String, key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PowerUnit {
    #[default]
    #[serde(rename = "dBm")]
    Dbm,
    #[serde(rename = "W")]
    Watt,
}

impl PowerUnit {
    fn to_power(self, v: f64) -> Result<Power, String> {
        let p = match self {
            Self::Dbm => Power::from_dbm(v),
            Self::Watt => Power::from_watts(v),
        };
        p.map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    #[serde(default)]
    pub power: PowerUnit,
}

/// Plane at which run powers in the manifest are quoted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerPlane {
    #[default]
    Generator,
    OnChip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOptions {
    #[serde(default = "default_knee")]
    pub twpa_knee_w: f64,
    #[serde(default)]
    pub power_plane: PowerPlane,
}

fn default_knee() -> f64 {
    DEFAULT_TWPA_KNEE_W
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            twpa_knee_w: DEFAULT_TWPA_KNEE_W,
            power_plane: PowerPlane::Generator,
        }
    }
}

/// Measured mechanical mode properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub mechanical_frequency_hz: f64,
    /// `[T in K, Γ_m/2π in Hz]` pairs.
    pub gamma_m_hz: Vec<[f64; 2]>,
}

impl DeviceSection {
    pub fn omega_m(&self) -> AngularRate {
        AngularRate::two_pi_hz(self.mechanical_frequency_hz)
    }

    /// `Γ_m(T)` in rad/s.
    pub fn gamma_m_table(&self) -> Result<TempTable, String> {
        let pts = self
            .gamma_m_hz
            .iter()
            .map(|[t, g]| (*t, 2.0 * std::f64::consts::PI * g))
            .collect();
        TempTable::new(pts).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    ReflectionSweep,
    SidebandSpectrum,
    TwpaScan,
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ReflectionSweep => "reflection_sweep",
            Self::SidebandSpectrum => "sideband_spectrum",
            Self::TwpaScan => "twpa_scan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Blue,
    Red,
    ProbeOnly,
}

impl Scheme {
    pub fn pump(self) -> Option<crate::optomech::PumpScheme> {
        match self {
            Self::Blue => Some(crate::optomech::PumpScheme::Blue),
            Self::Red => Some(crate::optomech::PumpScheme::Red),
            Self::ProbeOnly => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwpaPump {
    On,
    #[default]
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    /// Recorded past the self-oscillation threshold.
    SelfOscillating,
}

/// One `[[runs]]` table as written in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub id: String,
    pub kind: RunKind,
    pub t_cryo_k: f64,
    /// Relative thermometry uncertainty, read as "within ±x".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_uncertainty: Option<f64>,
    /// Power in the `[units]` default unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
    pub scheme: Scheme,
    #[serde(default)]
    pub twpa_pump: TwpaPump,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<RunFlag>,
}

/// True model parameters behind a synthetic dataset, in lab units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    pub f_c_hz: f64,
    /// `κ_ext/2π`.
    pub kappa_ext_hz: f64,
    pub kappa_tls0_hz: f64,
    pub kappa_dielec0_hz: f64,
    pub alpha_hz: f64,
    pub t_c_k: f64,
    /// `[T in K, P_cav⁰ in W]` pairs.
    pub p_cav0_w: Vec<[f64; 2]>,
    pub lambda0: f64,
    pub beta: f64,
    pub p_twpa0_w: Vec<[f64; 2]>,
    pub mechanical_frequency_hz: f64,
    pub g0_hz: f64,
    pub gamma_m_hz: Vec<[f64; 2]>,
}

fn table(pairs: &[[f64; 2]]) -> Result<TempTable, String> {
    TempTable::new(pairs.iter().map(|[t, v]| (*t, *v)).collect()).map_err(|e| e.to_string())
}

impl DeviceModel {
    /// Coupling regime at the lowest internal loss (TLS saturated, no
    /// quasiparticles).
    pub fn branch(&self) -> CouplingBranch {
        if self.kappa_ext_hz > self.kappa_dielec0_hz {
            CouplingBranch::Overcoupled
        } else {
            CouplingBranch::Undercoupled
        }
    }

    pub fn f_c(&self) -> Frequency {
        Frequency::hz(self.f_c_hz)
    }

    pub fn tls(&self) -> Result<TlsLossParams, String> {
        let p = TlsLossParams {
            f_c: self.f_c(),
            kappa_tls0: AngularRate::two_pi_hz(self.kappa_tls0_hz),
            p_cav0: table(&self.p_cav0_w)?,
            kappa_dielec0: AngularRate::two_pi_hz(self.kappa_dielec0_hz),
            alpha: AngularRate::two_pi_hz(self.alpha_hz),
            t_c: Temperature::kelvin(self.t_c_k),
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }

    pub fn twpa(&self) -> Result<TwpaTlsParams, String> {
        let p = TwpaTlsParams {
            f_ref: self.f_c(),
            lambda0: self.lambda0,
            beta: self.beta,
            p_twpa0: table(&self.p_twpa0_w)?,
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }

    pub fn optomech(&self) -> Result<OptomechParams, String> {
        let gm = self
            .gamma_m_hz
            .iter()
            .map(|[t, g]| [*t, 2.0 * std::f64::consts::PI * g])
            .collect::<Vec<_>>();
        let p = OptomechParams {
            omega_m: AngularRate::two_pi_hz(self.mechanical_frequency_hz),
            gamma_m: table(&gm)?,
            g0: AngularRate::two_pi_hz(self.g0_hz),
            f_c: self.f_c(),
            kappa_ext: AngularRate::two_pi_hz(self.kappa_ext_hz),
            branch: self.branch(),
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }

    pub fn device_section(&self) -> DeviceSection {
        DeviceSection {
            mechanical_frequency_hz: self.mechanical_frequency_hz,
            gamma_m_hz: self.gamma_m_hz.clone(),
        }
    }
}

/// Present only in synthetic manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub seed: u64,
    pub asymmetry: bool,
    pub noise: crate::synth::NoiseModel,
    pub device: DeviceModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub units: Units,
    pub chain: ChainCal,
    pub device: DeviceSection,
    #[serde(default)]
    pub options: ManifestOptions,
    pub runs: Vec<RunEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Transmission against generator power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwpaScan {
    pub p_generator: Vec<Power>,
    pub transmission: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunData {
    Sweep(ReflectionTrace),
    Spectrum(Spectrum),
    TwpaScan(TwpaScan),
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub id: String,
    pub kind: RunKind,
    pub t_cryo: Temperature,
    pub t_uncertainty: f64,
    /// On-chip power; `None` for TWPA scans.
    pub p_in: Option<Power>,
    pub scheme: Scheme,
    pub twpa_pump: TwpaPump,
    pub file: String,
    pub flag: Option<RunFlag>,
    pub data: RunData,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub chain: ChainCal,
    pub runs: Vec<RunRecord>,
    pub warnings: Vec<String>,
    /// SHA-256 of the manifest and of every data file, keyed by relative path.
    pub hashes: BTreeMap<String, String>,
}

impl Dataset {
    pub fn runs_of(&self, kind: RunKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.kind == kind)
    }

    pub fn is_synthetic(&self) -> bool {
        self.manifest.ground_truth.is_some()
    }
}

/// Default thermometry uncertainty: ±20 % at the demagnetization point, ±5 %
/// elsewhere.
pub fn default_t_uncertainty(t_k: f64) -> f64 {
    if t_k < 0.01 {
        0.20
    } else {
        0.05
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Read a dataset from `manifest_path`; data files resolve relative to it.
pub fn ingest(manifest_path: &Path) -> Result<Dataset, DatasetError> {
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read(manifest_path).map_err(|source| DatasetError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    ingest_with(&text, manifest_path, |rel| {
        let p = base.join(rel);
        std::fs::read(&p).map_err(|source| DatasetError::Io { path: p, source })
    })
}

/// Ingest from manifest bytes and a loader for data files.
pub fn ingest_with<L>(manifest_bytes: &[u8], manifest_label: &Path, load: L) -> Result<Dataset, DatasetError>
where
    L: Fn(&str) -> Result<Vec<u8>, DatasetError>,
{
    let text = std::str::from_utf8(manifest_bytes).map_err(|e| DatasetError::Manifest {
        path: manifest_label.to_path_buf(),
        message: format!("not UTF-8: {e}"),
    })?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| DatasetError::Manifest {
        path: manifest_label.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut hashes = BTreeMap::new();
    let label = manifest_label
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| MANIFEST_FILE.into());
    hashes.insert(label, sha256_hex(manifest_bytes));

    let schema = |run: &str, field: &str, message: String| DatasetError::Schema {
        run: run.into(),
        field: field.into(),
        message,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(schema(
            "-",
            "format_version",
            format!("unsupported version {}, expected {FORMAT_VERSION}", manifest.format_version),
        ));
    }
    let chain = manifest.chain;
    chain.validate().map_err(|e| schema("-", "chain", e.to_string()))?;
    if !(manifest.device.mechanical_frequency_hz > 0.0) {
        return Err(schema("-", "device.mechanical_frequency_hz", "must be > 0".into()));
    }
    manifest
        .device
        .gamma_m_table()
        .map_err(|e| schema("-", "device.gamma_m_hz", e))?;
    if !(manifest.options.twpa_knee_w > 0.0) {
        return Err(schema("-", "options.twpa_knee_w", "must be > 0".into()));
    }
    if manifest.runs.is_empty() {
        return Err(schema("-", "runs", "no runs listed".into()));
    }

    let mut runs = Vec::with_capacity(manifest.runs.len());
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut ids: BTreeMap<&str, ()> = BTreeMap::new();
    for e in &manifest.runs {
        if ids.insert(&e.id, ()).is_some() {
            return Err(schema(&e.id, "id", "duplicate run id".into()));
        }
        if !(e.t_cryo_k.is_finite() && e.t_cryo_k > 0.0) {
            return Err(schema(&e.id, "t_cryo_k", format!("{} must be > 0", e.t_cryo_k)));
        }
        let t_unc = e.t_uncertainty.unwrap_or_else(|| default_t_uncertainty(e.t_cryo_k));
        if !(t_unc.is_finite() && (0.0..1.0).contains(&t_unc)) {
            return Err(schema(&e.id, "t_uncertainty", format!("{t_unc} must lie in [0, 1)")));
        }
        let quoted = match (e.power, e.power_dbm, e.power_w) {
            (None, None, None) => None,
            (Some(v), None, None) => Some(manifest.units.power.to_power(v)),
            (None, Some(v), None) => Some(PowerUnit::Dbm.to_power(v)),
            (None, None, Some(v)) => Some(PowerUnit::Watt.to_power(v)),
            _ => return Err(schema(&e.id, "power", "give exactly one of power, power_dbm, power_w".into())),
        };
        let quoted = quoted
            .transpose()
            .map_err(|m| schema(&e.id, "power", m))?;
        let p_in = match (quoted, manifest.options.power_plane) {
            (Some(p), PowerPlane::Generator) => Some(p.scaled(chain.gain_to(ReferencePlane::OnChip))),
            (p, _) => p,
        };
        match e.kind {
            RunKind::TwpaScan => {
                if p_in.is_some() {
                    return Err(schema(&e.id, "power", "twpa_scan runs take powers from their file".into()));
                }
            }
            _ => {
                if p_in.is_none() {
                    return Err(schema(&e.id, "power", "required for this kind".into()));
                }
            }
        }
        match (e.kind, e.scheme) {
            (RunKind::SidebandSpectrum, Scheme::ProbeOnly) => {
                return Err(schema(&e.id, "scheme", "sideband spectra need blue or red".into()))
            }
            (RunKind::ReflectionSweep | RunKind::TwpaScan, Scheme::Blue | Scheme::Red) => {
                return Err(schema(&e.id, "scheme", format!("{} runs are probe_only", e.kind)))
            }
            _ => {}
        }

        let key = format!(
            "(T = {:.6e} K, P = {}, scheme = {:?}, kind = {}, twpa_pump = {:?})",
            e.t_cryo_k,
            p_in.map(|p| format!("{:.6e} W", p.as_watts())).unwrap_or_else(|| "-".into()),
            e.scheme,
            e.kind,
            e.twpa_pump
        );
        if let Some(first) = seen.insert(key.clone(), e.id.clone()) {
            return Err(DatasetError::Duplicate {
                first,
                second: e.id.clone(),
                key,
            });
        }

        let bytes = load(&e.file)?;
        hashes.insert(e.file.clone(), sha256_hex(&bytes));
        let path = PathBuf::from(&e.file);
        let data = match e.kind {
            RunKind::ReflectionSweep => RunData::Sweep(parse_sweep(&bytes, &path)?),
            RunKind::SidebandSpectrum => RunData::Spectrum(parse_spectrum(&bytes, &path)?),
            RunKind::TwpaScan => RunData::TwpaScan(parse_twpa_scan(&bytes, &path)?),
        };
        runs.push(RunRecord {
            id: e.id.clone(),
            kind: e.kind,
            t_cryo: Temperature::kelvin(e.t_cryo_k),
            t_uncertainty: t_unc,
            p_in,
            scheme: e.scheme,
            twpa_pump: e.twpa_pump,
            file: e.file.clone(),
            flag: e.flag,
            data,
        });
    }
    Ok(Dataset {
        manifest,
        chain,
        runs,
        warnings: Vec::new(),
        hashes,
    })
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(bytes: &[u8], path: &Path) -> Result<Table, DatasetError> {
    let csv_err = |line: u64, message: String| DatasetError::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(line, format!("`{s}` is not a finite number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }
    Ok(Table { headers, rows })
}

fn expect_headers(t: &Table, path: &Path, options: &[&[&str]]) -> Result<usize, DatasetError> {
    options
        .iter()
        .position(|h| t.headers.iter().map(String::as_str).eq(h.iter().copied()))
        .ok_or_else(|| DatasetError::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "header `{}` is not one of {}",
                t.headers.join(","),
                options.iter().map(|h| format!("`{}`", h.join(","))).collect::<Vec<_>>().join(", ")
            ),
        })
}

fn column(t: &Table, i: usize) -> Vec<f64> {
    t.rows.iter().map(|r| r[i]).collect()
}

fn data_error(path: &Path, e: impl fmt::Display) -> DatasetError {
    DatasetError::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    }
}

pub fn parse_sweep(bytes: &[u8], path: &Path) -> Result<ReflectionTrace, DatasetError> {
    let t = read_table(bytes, path)?;
    let trace = match expect_headers(&t, path, &[&["freq_hz", "mag_db"], &["freq_hz", "re", "im"]])? {
        0 => ReflectionTrace::new(column(&t, 0), column(&t, 1)),
        _ => ReflectionTrace::from_complex(column(&t, 0), &column(&t, 1), &column(&t, 2)),
    };
    trace.map_err(|e| data_error(path, e))
}

pub fn parse_spectrum(bytes: &[u8], path: &Path) -> Result<Spectrum, DatasetError> {
    let t = read_table(bytes, path)?;
    expect_headers(&t, path, &[&["freq_hz", "psd"]])?;
    Spectrum::new(column(&t, 0), column(&t, 1)).map_err(|e| data_error(path, e))
}

pub fn parse_twpa_scan(bytes: &[u8], path: &Path) -> Result<TwpaScan, DatasetError> {
    let t = read_table(bytes, path)?;
    let unit = match expect_headers(&t, path, &[&["p_gen_dbm", "transmission"], &["p_gen_w", "transmission"]])? {
        0 => PowerUnit::Dbm,
        _ => PowerUnit::Watt,
    };
    let p_generator = column(&t, 0)
        .into_iter()
        .map(|v| unit.to_power(v).map_err(|m| data_error(path, m)))
        .collect::<Result<Vec<_>, _>>()?;
    let transmission = column(&t, 1);
    if p_generator.len() < 5 {
        return Err(data_error(path, format!("{} points, need at least 5", p_generator.len())));
    }
    Ok(TwpaScan { p_generator, transmission })
}

/// CSV text of a magnitude sweep.
pub fn sweep_csv(trace: &ReflectionTrace) -> String {
    let mut s = String::from("freq_hz,mag_db\n");
    for (f, m) in trace.freq_hz.iter().zip(&trace.mag_db) {
        s.push_str(&format!("{f},{m}\n"));
    }
    s
}

pub fn spectrum_csv(spec: &Spectrum) -> String {
    let mut s = String::from("freq_hz,psd\n");
    for (f, v) in spec.freq_hz.iter().zip(&spec.psd) {
        s.push_str(&format!("{f},{v}\n"));
    }
    s
}

pub fn twpa_scan_csv(scan: &TwpaScan) -> String {
    let mut s = String::from("p_gen_dbm,transmission\n");
    for (p, v) in scan.p_generator.iter().zip(&scan.transmission) {
        s.push_str(&format!("{},{v}\n", p.to_dbm()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
format_version = 1
[units]
power = "dBm"
[chain]
injection_attenuation_db = 70.0
detection_gain_db = 60.0
[device]
mechanical_frequency_hz = 15.13e6
gamma_m_hz = [[0.004, 420.0], [0.4, 650.0]]
[[runs]]
id = "a"
kind = "reflection_sweep"
t_cryo_k = 0.02
power = -100.0
scheme = "probe_only"
file = "a.csv"
[[runs]]
id = "b"
kind = "reflection_sweep"
t_cryo_k = 0.02
power_w = 1e-16
scheme = "probe_only"
file = "b.csv"
"#;

    fn sweep_bytes() -> Vec<u8> {
        let mut s = String::from("freq_hz,mag_db\n");
        for i in 0..20 {
            s.push_str(&format!("{},{}\n", 5.15e9 + i as f64 * 1e4, -(i as f64 % 5.0)));
        }
        s.into_bytes()
    }

    fn loader(files: BTreeMap<String, Vec<u8>>) -> impl Fn(&str) -> Result<Vec<u8>, DatasetError> {
        move |rel| {
            files.get(rel).cloned().ok_or_else(|| DatasetError::Io {
                path: rel.into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing"),
            })
        }
    }

    fn files() -> BTreeMap<String, Vec<u8>> {
        [("a.csv".to_string(), sweep_bytes()), ("b.csv".to_string(), sweep_bytes())].into()
    }

    #[test]
    fn mixed_units_normalized() {
        let ds = ingest_with(MANIFEST.as_bytes(), Path::new("manifest.toml"), loader(files())).unwrap();
        // -100 dBm at the generator, 70 dB down: 1e-20 W on chip
        let a = ds.runs[0].p_in.unwrap().as_watts();
        assert!((a / 1e-20 - 1.0).abs() < 1e-12, "{a}");
        let b = ds.runs[1].p_in.unwrap().as_watts();
        assert!((b / 1e-23 - 1.0).abs() < 1e-12, "{b}");
        assert_eq!(ds.runs[0].t_uncertainty, 0.05);
        assert_eq!(ds.hashes.len(), 3);
    }

    #[test]
    fn duplicate_key_rejected() {
        let m = MANIFEST.replace("power_w = 1e-16", "power_w = 1e-13");
        let err = ingest_with(m.as_bytes(), Path::new("manifest.toml"), loader(files())).unwrap_err();
        assert!(matches!(err, DatasetError::Duplicate { .. }), "{err}");
    }

    #[test]
    fn truncated_csv_names_file_and_line() {
        let mut f = files();
        // drop the value column of the last row
        let text = String::from_utf8(sweep_bytes()).unwrap();
        let cut = text.rfind(',').unwrap();
        f.insert("b.csv".into(), text.as_bytes()[..cut].to_vec());
        let err = ingest_with(MANIFEST.as_bytes(), Path::new("manifest.toml"), loader(f)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("b.csv:21:"), "{msg}");
    }

    #[test]
    fn missing_file_carries_path() {
        let mut f = files();
        f.remove("b.csv");
        let err = ingest_with(MANIFEST.as_bytes(), Path::new("manifest.toml"), loader(f)).unwrap_err();
        assert!(err.to_string().contains("b.csv"), "{err}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let m = MANIFEST.replace("power = -100.0\n", "");
        let err = ingest_with(m.as_bytes(), Path::new("manifest.toml"), loader(files())).unwrap_err();
        assert!(matches!(&err, DatasetError::Schema { run, field, .. } if run == "a" && field == "power"), "{err}");
        let m = MANIFEST.replace("kind = \"reflection_sweep\"", "kind = \"sweep\"");
        let err = ingest_with(m.as_bytes(), Path::new("m.toml"), loader(files())).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
        let m = MANIFEST.replace("t_cryo_k = 0.02\npower = -100.0", "t_cryo_k = -1.0\npower = -100.0");
        let err = ingest_with(m.as_bytes(), Path::new("m.toml"), loader(files())).unwrap_err();
        assert!(err.to_string().contains("t_cryo_k"), "{err}");
    }

    #[test]
    fn bad_header() {
        let err = parse_spectrum(b"f,psd\n1,2\n", Path::new("s.csv")).unwrap_err();
        assert!(err.to_string().contains("s.csv:1"), "{err}");
    }

    #[test]
    fn csv_round_trips() {
        let scan = TwpaScan {
            p_generator: (0..6).map(|i| Power::watts(10f64.powi(-12 - i))).collect(),
            transmission: vec![0.6, 0.61, 0.7, 0.8, 0.95, 1.0],
        };
        let back = parse_twpa_scan(twpa_scan_csv(&scan).as_bytes(), Path::new("t.csv")).unwrap();
        for (a, b) in scan.p_generator.iter().zip(&back.p_generator) {
            assert!((a.as_watts() / b.as_watts() - 1.0).abs() < 1e-12);
        }
        assert_eq!(scan.transmission, back.transmission);
        let trace = ReflectionTrace::new((0..10).map(|i| 1e9 + i as f64).collect(), vec![-1.25; 10]).unwrap();
        assert_eq!(parse_sweep(sweep_csv(&trace).as_bytes(), Path::new("x")).unwrap(), trace);
    }
}
