//! Source and beam arithmetic: wavelength, coherence lengths, slit solid
//! angle, average and peak brightness, and photon degeneracy.
//!
//! Brightness is carried in the customary synchrotron units
//! ph/s/mrad²/mm²/0.1% bandwidth. The conversion to SI phase-space units
//! happens only inside [`degeneracy`].

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{Current, Duration, Energy, Frequency, Length, Rate};

/// hc in keV·Å.
pub const HC_KEV_ANGSTROM: f64 = 12.39842;
/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// FWHM of a Gaussian divided by its standard deviation, 2√(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;
/// Factor taking ph/s/mrad²/mm²/0.1%BW to ph/s/sr/m²/(Δλ/λ = 1).
pub const STANDARD_TO_SI_BRIGHTNESS: f64 = 1e15;

/// Storage-ring source and monochromator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub photon_energy: Energy,
    pub energy_resolution: Energy,
    pub bunch_frequency: Frequency,
    pub stored_current: Current,
    /// Horizontal source size, FWHM.
    pub source_size_h: Length,
    /// Vertical source size, FWHM.
    pub source_size_v: Length,
    pub source_distance: Length,
    /// Bunch duration, FWHM.
    pub bunch_duration: Duration,
    /// Tabulated wavelength. When present it replaces the value derived from
    /// `photon_energy` in the coherence and degeneracy arithmetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photon_wavelength: Option<Length>,
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("photon_energy", self.photon_energy.base()),
            ("energy_resolution", self.energy_resolution.base()),
            ("bunch_frequency", self.bunch_frequency.base()),
            ("stored_current", self.stored_current.base()),
            ("source_size_h", self.source_size_h.base()),
            ("source_size_v", self.source_size_v.base()),
            ("source_distance", self.source_distance.base()),
            ("bunch_duration", self.bunch_duration.base()),
        ];
        for (key, value) in checks {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(
                    format!("source.{key}"),
                    format!("must be strictly positive, got {value}"),
                ));
            }
        }
        if let Some(wl) = self.photon_wavelength {
            if !(wl.base().is_finite() && wl.base() > 0.0) {
                return Err(Error::config(
                    "source.photon_wavelength",
                    "must be strictly positive",
                ));
            }
        }
        if self.energy_resolution >= self.photon_energy {
            return Err(Error::config(
                "source.energy_resolution",
                "must be smaller than photon_energy",
            ));
        }
        Ok(())
    }

    /// Wavelength used by the coherence and degeneracy calculations.
    pub fn wavelength(&self) -> Length {
        self.photon_wavelength.unwrap_or_else(|| {
            wavelength_from_energy(self.photon_energy).expect("validated photon energy")
        })
    }

    /// Fractional bandwidth ΔE/E.
    pub fn relative_bandwidth(&self) -> f64 {
        self.energy_resolution.base() / self.photon_energy.base()
    }

    /// Fraction of time the pulsed beam is on, τ·f.
    pub fn duty_cycle(&self) -> f64 {
        self.bunch_duration.as_seconds() * self.bunch_frequency.as_hz()
    }

    /// Product of the rms source sizes, σ_h·σ_v in mm², from the FWHM values.
    pub fn rms_source_area_mm2(&self) -> f64 {
        (self.source_size_h.as_mm() / FWHM_PER_SIGMA)
            * (self.source_size_v.as_mm() / FWHM_PER_SIGMA)
    }
}

/// Slit aperture and flux delivered through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub slit_h: Length,
    pub slit_v: Length,
    pub photon_rate: Rate,
    /// Probability a photon survives optics and air losses between the
    /// first and the final beamsplitter.
    pub survival_probability: f64,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slit_h.base() > 0.0) {
            return Err(Error::config("beam.slit_h", "must be strictly positive"));
        }
        if !(self.slit_v.base() > 0.0) {
            return Err(Error::config("beam.slit_v", "must be strictly positive"));
        }
        if !(self.photon_rate.base() >= 0.0 && self.photon_rate.base().is_finite()) {
            return Err(Error::config("beam.photon_rate", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.survival_probability) {
            return Err(Error::config(
                "beam.survival_probability",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Brightness in ph/s/mrad²/mm²/0.1% bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Brightness(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceLengths {
    pub lateral_h: Length,
    pub lateral_v: Length,
    pub longitudinal: Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrightnessReport {
    /// mrad²
    pub solid_angle: f64,
    /// rms σ_h·σ_v in mm²
    pub source_area: f64,
    /// ΔE/E in units of 0.1%
    pub bandwidth_frac: f64,
    pub avg_brightness: Brightness,
    pub peak_brightness: Brightness,
    pub degeneracy: f64,
}

/// λ = hc/E.
pub fn wavelength_from_energy(energy: Energy) -> Result<Length> {
    let kev = energy.as_kev();
    if !(kev > 0.0) {
        return Err(Error::domain(format!(
            "photon energy must be positive, got {kev} keV"
        )));
    }
    Ok(Length::angstrom(HC_KEV_ANGSTROM / kev))
}

/// Lateral coherence widths ½λR/σ and longitudinal length ½λE/ΔE, using the
/// FWHM source sizes.
pub fn coherence_lengths(src: &SourceParams) -> CoherenceLengths {
    let lambda = src.wavelength().base();
    let r = src.source_distance.base();
    CoherenceLengths {
        lateral_h: Length::meters(0.5 * lambda * r / src.source_size_h.base()),
        lateral_v: Length::meters(0.5 * lambda * r / src.source_size_v.base()),
        longitudinal: Length::meters(0.5 * lambda / src.relative_bandwidth()),
    }
}

/// Solid angle subtended by the slits at the source, in mrad².
pub fn solid_angle(beam: &BeamConfig, src: &SourceParams) -> f64 {
    let r = src.source_distance.base();
    let h_mrad = beam.slit_h.base() / r * 1e3;
    let v_mrad = beam.slit_v.base() / r * 1e3;
    h_mrad * v_mrad
}

/// Report with solid angle, source area, bandwidth and average brightness
/// filled in. Peak brightness and degeneracy are left at zero; see
/// [`brightness_report`] for the complete chain.
pub fn avg_brightness(beam: &BeamConfig, src: &SourceParams) -> Result<BrightnessReport> {
    let bandwidth_frac = src.relative_bandwidth() / 1e-3;
    if !(bandwidth_frac > 0.0) {
        return Err(Error::domain("zero bandwidth"));
    }
    let omega = solid_angle(beam, src);
    let area = src.rms_source_area_mm2();
    let avg = beam.photon_rate.as_per_second() / (omega * area * bandwidth_frac);
    Ok(BrightnessReport {
        solid_angle: omega,
        source_area: area,
        bandwidth_frac,
        avg_brightness: Brightness(avg),
        peak_brightness: Brightness(0.0),
        degeneracy: 0.0,
    })
}

/// Average brightness divided by the duty cycle τ·f.
pub fn peak_brightness(avg: Brightness, src: &SourceParams) -> Result<Brightness> {
    let duty = src.duty_cycle();
    if !(duty > 0.0 && duty <= 1.0) {
        return Err(Error::domain(format!(
            "duty cycle must lie in (0, 1], got {duty}"
        )));
    }
    Ok(Brightness(avg.0 / duty))
}

/// Mean photon occupation of a coherent mode, n = Bλ³/(4√2 c), with `peak`
/// given in standard units.
pub fn degeneracy(peak: Brightness, wavelength: Length) -> f64 {
    let b_si = peak.0 * STANDARD_TO_SI_BRIGHTNESS;
    let l = wavelength.base();
    b_si * l * l * l / (4.0 * SQRT_2 * SPEED_OF_LIGHT)
}

/// Full brightness chain: average, peak and degeneracy.
pub fn brightness_report(beam: &BeamConfig, src: &SourceParams) -> Result<BrightnessReport> {
    let mut report = avg_brightness(beam, src)?;
    report.peak_brightness = peak_brightness(report.avg_brightness, src)?;
    report.degeneracy = degeneracy(report.peak_brightness, src.wavelength());
    Ok(report)
}
