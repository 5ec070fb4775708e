//! Absolute calibration of microwave optomechanical measurements.
//!
//! Converts cavity reflection sweeps, mechanical sideband spectra and TWPA
//! transmission scans into a phonon population, correcting for the power- and
//! temperature-dependent two-level-system losses of both the cavity and the
//! amplifier.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cavity;
pub mod dataset;
pub mod fit;
pub mod optomech;
pub mod peak;
pub mod pipeline;
pub mod selftest;
pub mod synth;
pub mod tls;
pub mod units;
