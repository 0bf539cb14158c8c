//! Parameter sets for the 8 keV Si(400) interferometer measurement.

use crate::source_optics::{BeamConfig, SourceParams};
use crate::units::{Current, Duration, Energy, Frequency, Length, Rate};

/// Si(400) lattice-plane spacing.
pub const SI_400_SPACING: Length = Length::from_base(1.3578e-10);

/// Storage-ring source at 8 keV with a 74 meV monochromator passband.
pub fn source_8kev() -> SourceParams {
    SourceParams {
        photon_energy: Energy::kev(8.0),
        energy_resolution: Energy::mev(74.0),
        bunch_frequency: Frequency::mhz(13.0),
        stored_current: Current::ma(130.0),
        source_size_h: Length::um(28.0),
        source_size_v: Length::um(19.0),
        source_distance: Length::meters(35.0),
        bunch_duration: Duration::ps(230.0),
        photon_wavelength: Some(Length::angstrom(1.5)),
    }
}

/// 1 × 1 mm² slits ahead of the interferometer.
pub fn full_beam() -> BeamConfig {
    BeamConfig {
        slit_h: Length::mm(1.0),
        slit_v: Length::mm(1.0),
        photon_rate: Rate::per_second(1.3e12),
        survival_probability: 1.0,
    }
}

/// 80 × 80 µm² beam behind the interferometer, two photons per pulse.
pub fn hom_beam() -> BeamConfig {
    BeamConfig {
        slit_h: Length::mm(0.08),
        slit_v: Length::mm(0.08),
        photon_rate: Rate::per_second(2.6e7),
        survival_probability: 1.0,
    }
}
