//! Unit-carrying scalars.
//!
//! Frequencies are stored in Hz, powers in watts and temperatures in kelvin.
//! Angular rates only appear where a model formula needs them. Decibels are
//! always power decibels (`10·log10`).

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Planck constant, J·s (exact, SI 2019).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Boltzmann constant, J/K (exact, SI 2019).
pub const BOLTZMANN: f64 = 1.380_649e-23;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("invalid {quantity}: {value} ({reason})")]
    InvalidArgument {
        quantity: &'static str,
        value: f64,
        reason: &'static str,
    },
}

fn check(quantity: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<f64, UnitError> {
    if value.is_finite() && ok {
        Ok(value)
    } else {
        Err(UnitError::InvalidArgument {
            quantity,
            value,
            reason,
        })
    }
}

/// A frequency in Hz.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frequency(f64);

impl Frequency {
    pub fn from_hz(hz: f64) -> Result<Self, UnitError> {
        check("frequency", hz, true, "must be finite").map(Self)
    }

    /// Constructor for literal constants known to be valid.
    pub const fn hz(hz: f64) -> Self {
        Self(hz)
    }

    pub fn as_hz(self) -> f64 {
        self.0
    }

    pub fn to_angular(self) -> AngularRate {
        AngularRate(2.0 * PI * self.0)
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} Hz", self.0)
    }
}

/// An angular rate in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AngularRate(f64);

impl AngularRate {
    pub fn from_rad_per_s(w: f64) -> Result<Self, UnitError> {
        check("angular rate", w, true, "must be finite").map(Self)
    }

    pub const fn rad_per_s(w: f64) -> Self {
        Self(w)
    }

    /// `2π · hz`, the usual way device constants are quoted.
    pub fn two_pi_hz(hz: f64) -> Self {
        Self(2.0 * PI * hz)
    }

    pub fn as_rad_per_s(self) -> f64 {
        self.0
    }

    pub fn to_frequency(self) -> Frequency {
        Frequency(self.0 / (2.0 * PI))
    }

    pub fn as_hz(self) -> f64 {
        self.0 / (2.0 * PI)
    }
}

impl std::ops::Add for AngularRate {
    type Output = AngularRate;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl std::ops::Sub for AngularRate {
    type Output = AngularRate;
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl fmt::Display for AngularRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "2π·{} Hz", self.as_hz())
    }
}

/// A power in watts.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Power(f64);

impl Power {
    pub fn from_watts(w: f64) -> Result<Self, UnitError> {
        check("power", w, w >= 0.0, "must be finite and non-negative").map(Self)
    }

    pub const fn watts(w: f64) -> Self {
        Self(w)
    }

    pub fn from_dbm(dbm: f64) -> Result<Self, UnitError> {
        dbm_to_watts(dbm)
    }

    pub fn as_watts(self) -> f64 {
        self.0
    }

    pub fn to_dbm(self) -> f64 {
        10.0 * (self.0 / 1e-3).log10()
    }

    pub fn scaled(self, gain: Gain) -> Power {
        Power(self.0 * gain.linear())
    }
}

impl fmt::Display for Power {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e} W", self.0)
    }
}

/// `1e-3 · 10^(p/10)` watts.
pub fn dbm_to_watts(dbm: f64) -> Result<Power, UnitError> {
    let dbm = check("power in dBm", dbm, true, "must be finite")?;
    Ok(Power(1e-3 * 10f64.powf(dbm / 10.0)))
}

/// A temperature in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn from_kelvin(k: f64) -> Result<Self, UnitError> {
        check("temperature", k, k > 0.0, "must be finite and positive").map(Self)
    }

    pub const fn kelvin(k: f64) -> Self {
        Self(k)
    }

    pub fn millikelvin(mk: f64) -> Self {
        Self(mk * 1e-3)
    }

    pub fn as_kelvin(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mK", self.0 * 1e3)
    }
}

/// A power gain in dB. Negative values are attenuation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gain(f64);

impl Gain {
    pub fn from_db(db: f64) -> Result<Self, UnitError> {
        check("gain", db, true, "must be finite").map(Self)
    }

    pub const fn db(db: f64) -> Self {
        Self(db)
    }

    pub fn from_linear(factor: f64) -> Result<Self, UnitError> {
        check("linear gain", factor, factor > 0.0, "must be finite and positive")
            .map(|x| Self(10.0 * x.log10()))
    }

    pub fn as_db(self) -> f64 {
        self.0
    }

    pub fn linear(self) -> f64 {
        10f64.powf(self.0 / 10.0)
    }

    pub fn inverse(self) -> Gain {
        Gain(-self.0)
    }
}

impl std::ops::Add for Gain {
    type Output = Gain;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

/// Where a power value is referenced along the microwave chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePlane {
    Generator,
    OnChip,
    TwpaInput,
}

/// Calibrated attenuation and gain of the measurement chain.
///
/// Injection runs generator → chip. The chip output passes `chip_to_twpa`
/// (negative dB, circulators and cabling) to reach the TWPA input, and the
/// whole detection path from chip output to the recorded spectrum is
/// `detection_gain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainCal {
    pub injection_attenuation_db: f64,
    #[serde(default)]
    pub chip_to_twpa_db: f64,
    pub detection_gain_db: f64,
    #[serde(default = "default_chain_uncertainty")]
    pub uncertainty_db: f64,
}

fn default_chain_uncertainty() -> f64 {
    1.0
}

impl ChainCal {
    pub fn new(injection_attenuation_db: f64, detection_gain_db: f64) -> Self {
        Self {
            injection_attenuation_db,
            chip_to_twpa_db: 0.0,
            detection_gain_db,
            uncertainty_db: default_chain_uncertainty(),
        }
    }

    pub fn validate(&self) -> Result<(), UnitError> {
        check("injection attenuation", self.injection_attenuation_db, true, "must be finite")?;
        check("chip-to-TWPA gain", self.chip_to_twpa_db, true, "must be finite")?;
        check("detection gain", self.detection_gain_db, true, "must be finite")?;
        check("chain uncertainty", self.uncertainty_db, self.uncertainty_db >= 0.0, "must be non-negative")?;
        Ok(())
    }

    /// Net gain from the generator to `plane`.
    pub fn gain_to(&self, plane: ReferencePlane) -> Gain {
        match plane {
            ReferencePlane::Generator => Gain(0.0),
            ReferencePlane::OnChip => Gain(-self.injection_attenuation_db),
            ReferencePlane::TwpaInput => Gain(-self.injection_attenuation_db + self.chip_to_twpa_db),
        }
    }

    pub fn detection_gain(&self) -> Gain {
        Gain(self.detection_gain_db)
    }
}

/// Generator power → on-chip power.
pub fn apply_chain(p_generator: Power, chain: &ChainCal) -> Result<Power, UnitError> {
    chain.validate()?;
    Ok(to_plane(p_generator, chain, ReferencePlane::OnChip))
}

/// Generator power → power at `plane`.
pub fn to_plane(p_generator: Power, chain: &ChainCal, plane: ReferencePlane) -> Power {
    p_generator.scaled(chain.gain_to(plane))
}

/// Recorded output power → power at the chip output (inverse of detection).
pub fn deembed_detection(p_recorded: Power, chain: &ChainCal) -> Power {
    p_recorded.scaled(chain.detection_gain().inverse())
}

/// Chip output power → recorded output power.
pub fn embed_detection(p_chip: Power, chain: &ChainCal) -> Power {
    p_chip.scaled(chain.detection_gain())
}
