//! Simulation and analysis of two-photon (Hong–Ou–Mandel) interference of
//! thermal x-ray pulses in a crystal Mach–Zehnder interferometer.
//!
//! The pipeline runs bottom-up:
//!
//! - [`source_optics`] turns source and slit parameters into brightness,
//!   coherence lengths and the photon degeneracy per mode.
//! - [`photon_stats`] samples thermal (Bose–Einstein) mode occupations.
//! - [`interferometer`] routes photons and applies the two-photon
//!   interference law at the final splitter.
//! - [`detector`] models photon-number-resolving APD amplitudes and their
//!   threshold calibration.
//! - [`event_engine`] simulates and classifies pulses in parallel into
//!   mergeable coincidence counters; [`event_file`] stores pulse streams.
//! - [`scan_analysis`] drives displacement scans and fits the dip.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detector;
pub mod error;
pub mod event_engine;
pub mod event_file;
pub mod interferometer;
pub mod photon_stats;
pub mod presets;
pub mod rng;
pub mod scan_analysis;
pub mod source_optics;
pub mod units;

pub use error::{Error, Result};

/// Brute-force two-photon oracle shared with the integration tests.
#[cfg(test)]
#[path = "../tests/support/fock.rs"]
mod fock;
