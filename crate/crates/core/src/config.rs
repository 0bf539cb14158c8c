//! TOML run configuration.
//!
//! Dimensioned values are strings with a unit suffix (`"8 keV"`, `"80 um"`);
//! a bare number for such a field is rejected with the offending key.
//! Unknown keys are rejected in every section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{ApdModel, Calibration};
use crate::error::{Error, Result};
use crate::event_engine::SimulationConfig;
use crate::event_file::RecordType;
use crate::interferometer::{
    bragg_angle, OverlapGeometry, OverlapProfile, RockingCurve, SplitterState,
};
use crate::presets::SI_400_SPACING;
use crate::scan_analysis::{ChannelSelection, ScanPlan, DEFAULT_WING_FRACTION};
use crate::source_optics::{wavelength_from_energy, BeamConfig, SourceParams};
use crate::units::{Angle, Current, Duration, Energy, Frequency, Length, Rate, UnitError};

/// A dimensioned entry as written in the file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum RawQuantity {
    Text(String),
    Number(f64),
}

fn quantity<T>(key: &str, raw: &RawQuantity, parse: fn(&str) -> Result<T, UnitError>) -> Result<T> {
    match raw {
        RawQuantity::Text(s) => parse(s).map_err(|source| Error::Unit {
            key: key.to_owned(),
            source,
        }),
        RawQuantity::Number(v) => Err(Error::Unit {
            key: key.to_owned(),
            source: UnitError::MissingUnit(v.to_string()),
        }),
    }
}

fn optional<T>(
    key: &str,
    raw: &Option<RawQuantity>,
    parse: fn(&str) -> Result<T, UnitError>,
) -> Result<Option<T>> {
    raw.as_ref().map(|r| quantity(key, r, parse)).transpose()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    source: RawSource,
    beam: RawBeam,
    #[serde(default)]
    interferometer: RawInterferometer,
    #[serde(default)]
    detector: RawDetector,
    #[serde(default)]
    simulation: RawSimulation,
    scan: Option<RawScan>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    photon_energy: RawQuantity,
    energy_resolution: RawQuantity,
    bunch_frequency: RawQuantity,
    stored_current: RawQuantity,
    source_size_h: RawQuantity,
    source_size_v: RawQuantity,
    source_distance: RawQuantity,
    bunch_duration: RawQuantity,
    photon_wavelength: Option<RawQuantity>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBeam {
    slit_h: RawQuantity,
    slit_v: RawQuantity,
    photon_rate: RawQuantity,
    #[serde(default = "one")]
    survival_probability: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInterferometer {
    beam_width: Option<RawQuantity>,
    bragg_angle: Option<RawQuantity>,
    lattice_spacing: Option<RawQuantity>,
    reflectance_at_center: Option<f64>,
    rocking_width: Option<RawQuantity>,
    absorption: Option<f64>,
    operating_offset: Option<RawQuantity>,
    balance_tolerance: Option<f64>,
    displacement: Option<RawQuantity>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    gain_per_photon: Option<f64>,
    gain_dispersion: Option<f64>,
    electronic_noise: Option<f64>,
    max_resolvable: Option<u8>,
    calibration: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    mean_photons: Option<f64>,
    modes: Option<u32>,
    seed: Option<u64>,
    n_pulses: Option<u64>,
    record_type: Option<RecordKind>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScan {
    start: Option<RawQuantity>,
    stop: Option<RawQuantity>,
    step: Option<RawQuantity>,
    points: Option<Vec<RawQuantity>>,
    dwell: RawQuantity,
    #[serde(default = "one_u32")]
    repeats: u32,
    #[serde(default)]
    channels: ChannelSelection,
    #[serde(default = "default_wing")]
    wing_fraction: f64,
}

fn one_u32() -> u32 {
    1
}

fn default_wing() -> f64 {
    DEFAULT_WING_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    #[default]
    Integer,
    Amplitude,
}

impl From<RecordKind> for RecordType {
    fn from(k: RecordKind) -> Self {
        match k {
            RecordKind::Integer => RecordType::IntegerPair,
            RecordKind::Amplitude => RecordType::AmplitudePair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferometerConfig {
    pub geometry: OverlapGeometry,
    pub splitter: SplitterState,
    pub balance_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSection {
    pub mean_photons: f64,
    pub modes: u32,
    pub seed: u64,
    pub n_pulses: u64,
    pub record_type: RecordKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSection {
    pub plan: ScanPlan,
    pub wing_fraction: f64,
}

/// Validated configuration for every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source: SourceParams,
    pub beam: BeamConfig,
    pub interferometer: InterferometerConfig,
    pub detector: ApdModel,
    /// Thresholds used to digitize amplitudes; ideal midpoints unless a
    /// calibration file is configured.
    pub calibration: Calibration,
    pub simulation: SimulationSection,
    pub scan: Option<ScanSection>,
}

pub const DEFAULT_MODES: u32 = 100;
pub const DEFAULT_MEAN_PHOTONS: f64 = 2.0;
pub const DEFAULT_BALANCE_TOLERANCE: f64 = 0.01;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_with_base(&text, path.parent())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, None)
    }

    /// Relative calibration paths resolve against `base`.
    pub fn parse_with_base(text: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("<file>").to_owned();
            Error::Config {
                key,
                message: e.to_string().trim().to_owned(),
            }
        })?;
        let s = &raw.source;
        let source = SourceParams {
            photon_energy: quantity("source.photon_energy", &s.photon_energy, Energy::parse)?,
            energy_resolution: quantity(
                "source.energy_resolution",
                &s.energy_resolution,
                Energy::parse,
            )?,
            bunch_frequency: quantity(
                "source.bunch_frequency",
                &s.bunch_frequency,
                Frequency::parse,
            )?,
            stored_current: quantity("source.stored_current", &s.stored_current, Current::parse)?,
            source_size_h: quantity("source.source_size_h", &s.source_size_h, Length::parse)?,
            source_size_v: quantity("source.source_size_v", &s.source_size_v, Length::parse)?,
            source_distance: quantity("source.source_distance", &s.source_distance, Length::parse)?,
            bunch_duration: quantity("source.bunch_duration", &s.bunch_duration, Duration::parse)?,
            photon_wavelength: optional(
                "source.photon_wavelength",
                &s.photon_wavelength,
                Length::parse,
            )?,
        };
        source.validate()?;

        let b = &raw.beam;
        let beam = BeamConfig {
            slit_h: quantity("beam.slit_h", &b.slit_h, Length::parse)?,
            slit_v: quantity("beam.slit_v", &b.slit_v, Length::parse)?,
            photon_rate: quantity("beam.photon_rate", &b.photon_rate, Rate::parse)?,
            survival_probability: b.survival_probability,
        };
        beam.validate()?;

        let interferometer = interferometer(&raw.interferometer, &source, &beam)?;

        let d = &raw.detector;
        let defaults = ApdModel::default();
        let detector = ApdModel {
            gain_per_photon: d.gain_per_photon.unwrap_or(defaults.gain_per_photon),
            gain_dispersion: d.gain_dispersion.unwrap_or(defaults.gain_dispersion),
            electronic_noise: d.electronic_noise.unwrap_or(defaults.electronic_noise),
            max_resolvable: d.max_resolvable.unwrap_or(defaults.max_resolvable),
        };
        detector.validate()?;
        let calibration = match &d.calibration {
            Some(p) => {
                let p = base.map_or_else(|| p.clone(), |b| b.join(p));
                let cal = Calibration::load(&p)?;
                if cal.max_resolvable() != detector.max_resolvable {
                    return Err(Error::config(
                        "detector.calibration",
                        format!(
                            "file resolves {} photons, detector.max_resolvable is {}",
                            cal.max_resolvable(),
                            detector.max_resolvable
                        ),
                    ));
                }
                cal
            }
            None => Calibration::midpoints(detector.gain_per_photon, detector.max_resolvable),
        };

        let sim = &raw.simulation;
        let simulation = SimulationSection {
            mean_photons: sim.mean_photons.unwrap_or(DEFAULT_MEAN_PHOTONS),
            modes: sim.modes.unwrap_or(DEFAULT_MODES),
            seed: sim.seed.unwrap_or(0),
            n_pulses: sim.n_pulses.unwrap_or(1_000_000),
            record_type: sim.record_type.unwrap_or_default(),
        };

        let scan = raw.scan.as_ref().map(scan_section).transpose()?;

        let config = Self {
            source,
            beam,
            interferometer,
            detector,
            calibration,
            simulation,
            scan,
        };
        config.simulation_config()?.validate()?;
        Ok(config)
    }

    /// Per-mode mean occupancy μ/M.
    pub fn mode_occupancy(&self) -> f64 {
        self.simulation.mean_photons / self.simulation.modes as f64
    }

    /// Engine configuration at the configured splitter displacement.
    pub fn simulation_config(&self) -> Result<SimulationConfig> {
        let overlap = self
            .interferometer
            .geometry
            .overlap(self.interferometer.splitter.displacement);
        Ok(SimulationConfig {
            mean_photons: self.simulation.mean_photons,
            modes: self.simulation.modes,
            survival_probability: self.beam.survival_probability,
            overlap,
            bunch_frequency_hz: self.source.bunch_frequency.as_hz(),
            detector: self.detector,
            calibration: self.calibration.clone(),
        })
    }

    /// Hex SHA-256 of the canonical JSON form of the validated
    /// configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn interferometer(
    raw: &RawInterferometer,
    source: &SourceParams,
    beam: &BeamConfig,
) -> Result<InterferometerConfig> {
    let beam_width = optional("interferometer.beam_width", &raw.beam_width, Length::parse)?
        .unwrap_or(beam.slit_v);
    let bragg = match (&raw.bragg_angle, &raw.lattice_spacing) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "interferometer.bragg_angle",
                "give either bragg_angle or lattice_spacing, not both",
            ))
        }
        (Some(a), None) => quantity("interferometer.bragg_angle", a, Angle::parse)?,
        (None, spacing) => {
            let d = optional("interferometer.lattice_spacing", spacing, Length::parse)?
                .unwrap_or(SI_400_SPACING);
            let wl = wavelength_from_energy(source.photon_energy)?;
            bragg_angle(wl, d)
                .map_err(|e| Error::config("interferometer.lattice_spacing", e.to_string()))?
        }
    };
    let geometry = OverlapGeometry {
        beam_width,
        bragg_angle: bragg,
    };
    geometry.validate()?;

    let curve = RockingCurve {
        reflectance_at_center: raw.reflectance_at_center.unwrap_or(1.0),
        half_width: optional(
            "interferometer.rocking_width",
            &raw.rocking_width,
            Angle::parse,
        )?
        .unwrap_or(Angle::urad(5.0)),
        absorption: raw.absorption.unwrap_or(0.0),
    };
    curve.validate()?;
    let angular_offset = match optional(
        "interferometer.operating_offset",
        &raw.operating_offset,
        Angle::parse,
    )? {
        Some(a) => a,
        None => curve
            .operating_offset()
            .map_err(|e| Error::config("interferometer.reflectance_at_center", e.to_string()))?,
    };
    let splitter = SplitterState {
        angular_offset,
        displacement: optional(
            "interferometer.displacement",
            &raw.displacement,
            Length::parse,
        )?
        .unwrap_or(Length::um(0.0)),
        curve,
    };
    let balance_tolerance = raw.balance_tolerance.unwrap_or(DEFAULT_BALANCE_TOLERANCE);
    if !(balance_tolerance >= 0.0) {
        return Err(Error::config(
            "interferometer.balance_tolerance",
            "must be non-negative",
        ));
    }
    splitter.check_balanced(balance_tolerance)?;
    Ok(InterferometerConfig {
        geometry,
        splitter,
        balance_tolerance,
    })
}

fn scan_section(raw: &RawScan) -> Result<ScanSection> {
    let um = |key: &str, r: &RawQuantity| quantity(key, r, Length::parse).map(Length::as_um);
    let grid_um = match (&raw.points, &raw.start, &raw.stop, &raw.step) {
        (Some(points), None, None, None) => points
            .iter()
            .enumerate()
            .map(|(i, p)| um(&format!("scan.points[{i}]"), p))
            .collect::<Result<Vec<_>>>()?,
        (None, Some(start), Some(stop), Some(step)) => {
            let (start, stop, step) = (
                um("scan.start", start)?,
                um("scan.stop", stop)?,
                um("scan.step", step)?,
            );
            if !(step > 0.0) || !(stop >= start) {
                return Err(Error::config("scan.step", "need step > 0 and stop ≥ start"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| start + i as f64 * step).collect()
        }
        _ => {
            return Err(Error::config(
                "scan",
                "give either `points` or all of `start`, `stop` and `step`",
            ))
        }
    };
    let plan = ScanPlan {
        grid_um,
        dwell_s: quantity("scan.dwell", &raw.dwell, Duration::parse)?.as_seconds(),
        repeats: raw.repeats,
        channels: raw.channels,
    };
    plan.validate()?;
    if !(raw.wing_fraction > 0.0 && raw.wing_fraction <= 0.5) {
        return Err(Error::config("scan.wing_fraction", "must lie in (0, 0.5]"));
    }
    Ok(ScanSection {
        plan,
        wing_fraction: raw.wing_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) const HOM: &str = r#"
[source]
photon_energy = "8 keV"
energy_resolution = "74 meV"
bunch_frequency = "13 MHz"
stored_current = "130 mA"
source_size_h = "28 um"
source_size_v = "19 um"
source_distance = "35 m"
bunch_duration = "230 ps"
photon_wavelength = "1.5 Å"

[beam]
slit_h = "0.08 mm"
slit_v = "0.08 mm"
photon_rate = "2.6e7 ph/s"

[simulation]
mean_photons = 2.0
modes = 500
seed = 7
n_pulses = 1000

[scan]
start = "-300 um"
stop = "300 um"
step = "30 um"
dwell = "1 ms"
repeats = 5
"#;

    #[test]
    fn parses_full_file() {
        let c = RunConfig::parse(HOM).unwrap();
        assert_relative_eq!(c.source.photon_energy.as_kev(), 8.0);
        assert_relative_eq!(c.beam.slit_v.as_mm(), 0.08);
        assert_relative_eq!(
            c.interferometer.geometry.bragg_angle.as_degrees(),
            34.80,
            epsilon = 0.01
        );
        assert_relative_eq!(c.interferometer.geometry.beam_width.as_um(), 80.0);
        assert_relative_eq!(c.mode_occupancy(), 0.004);
        let scan = c.scan.as_ref().unwrap();
        assert_eq!(scan.plan.grid_um.len(), 21);
        assert_relative_eq!(scan.plan.grid_um[20], 300.0, epsilon = 1e-9);
        assert_eq!(scan.plan.pulses_per_repeat(13e6), 13_000);
        assert_eq!(c.simulation_config().unwrap().overlap, 1.0);
    }

    #[test]
    fn missing_unit_names_key() {
        let text = HOM.replace(r#"source_distance = "35 m""#, "source_distance = 35");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Unit {
                key,
                source: UnitError::MissingUnit(_),
            } => assert_eq!(key, "source.source_distance"),
            other => panic!("unexpected {other:?}"),
        }
        let text = HOM.replace(r#""0.08 mm""#, r#""0.08""#);
        assert!(
            matches!(RunConfig::parse(&text), Err(Error::Unit { key, .. }) if key == "beam.slit_h")
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = HOM.replace("[beam]", "[beam]\nslit_diag = \"1 mm\"");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "slit_diag"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_errors_name_key() {
        let text = HOM.replace("modes = 500", "modes = 0");
        assert!(
            matches!(RunConfig::parse(&text), Err(Error::Config { key, .. }) if key == "simulation.modes")
        );
        let text = HOM.replace(r#"step = "30 um""#, r#"step = "-30 um""#);
        assert!(
            matches!(RunConfig::parse(&text), Err(Error::Config { key, .. }) if key == "scan.step")
        );
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::parse(HOM).unwrap();
        let b = RunConfig::parse(&HOM.replace("seed = 7", "seed = 8")).unwrap();
        assert_eq!(a.digest(), RunConfig::parse(HOM).unwrap().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn displacement_sets_overlap() {
        let text = HOM.replace(
            "[simulation]",
            "[interferometer]\ndisplacement = \"70.1 um\"\n\n[simulation]",
        );
        let c = RunConfig::parse(&text).unwrap();
        assert_relative_eq!(c.simulation_config().unwrap().overlap, 0.5, epsilon = 1e-3);
    }
}
