//! Mach-Zehnder geometry and the final (interfering) beamsplitter.
//!
//! The splitter reflectivity is a phenomenological Lorentzian rocking curve.
//! Interference between the two arms is controlled by a mode-overlap factor
//! η ∈ [0, 1] computed from the footprint overlap of the two beams on the
//! splitter as it is displaced by Δx.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{Angle, Length};

/// Lorentzian reflectivity peak around the Bragg condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RockingCurve {
    /// Reflectance at the rocking-curve center.
    pub reflectance_at_center: f64,
    /// Half width at half maximum of the reflectivity peak.
    pub half_width: Angle,
    /// Fraction of the beam absorbed, independent of angle.
    pub absorption: f64,
}

impl RockingCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width.base() > 0.0) {
            return Err(Error::config(
                "interferometer.rocking_width",
                "must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.absorption) {
            return Err(Error::config(
                "interferometer.absorption",
                "must lie in [0, 1)",
            ));
        }
        if !(self.reflectance_at_center > 0.0
            && self.reflectance_at_center <= 1.0 - self.absorption)
        {
            return Err(Error::config(
                "interferometer.reflectance_at_center",
                "must lie in (0, 1 - absorption]",
            ));
        }
        Ok(())
    }

    pub fn reflectance(&self, offset: Angle) -> f64 {
        let x = offset.base() / self.half_width.base();
        self.reflectance_at_center / (1.0 + x * x)
    }

    /// Positive angular offset at which R = T = (1 − absorption)/2.
    pub fn operating_offset(&self) -> Result<Angle> {
        let target = 0.5 * (1.0 - self.absorption);
        if self.reflectance_at_center < target {
            return Err(Error::domain(format!(
                "peak reflectance {} never reaches the 50-50 point {target}",
                self.reflectance_at_center
            )));
        }
        let x = (self.reflectance_at_center / target - 1.0).sqrt();
        Ok(Angle::radians(x * self.half_width.base()))
    }
}

/// Final beamsplitter position: angle on the rocking curve and displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitterState {
    pub angular_offset: Angle,
    pub displacement: Length,
    pub curve: RockingCurve,
}

impl SplitterState {
    /// Checks that the splitter is balanced to within `tolerance`.
    pub fn check_balanced(&self, tolerance: f64) -> Result<()> {
        let c = rocking_curve(self);
        if (c.reflectance - c.transmittance).abs() > tolerance {
            return Err(Error::config(
                "interferometer.operating_offset",
                format!(
                    "splitter is not 50-50 at this offset: R = {:.4}, T = {:.4}",
                    c.reflectance, c.transmittance
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCoefficients {
    pub reflectance: f64,
    pub transmittance: f64,
}

pub fn rocking_curve(state: &SplitterState) -> SplitCoefficients {
    let r = state.curve.reflectance(state.angular_offset);
    SplitCoefficients {
        reflectance: r,
        transmittance: 1.0 - r - state.curve.absorption,
    }
}

/// Bragg angle θ with sin θ = λ/2d.
pub fn bragg_angle(wavelength: Length, spacing: Length) -> Result<Angle> {
    let s = wavelength.base() / (2.0 * spacing.base());
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::domain(format!("no Bragg reflection: λ/2d = {s}")));
    }
    Ok(Angle::radians(s.asin()))
}

/// Overlap factor as a function of splitter displacement.
pub trait OverlapProfile: Send + Sync {
    fn overlap(&self, dx: Length) -> f64;
    /// |Δx| beyond which the overlap is zero.
    fn support(&self) -> Length;
}

/// Two beams of width L_v crossing on a crystal set at the Bragg angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapGeometry {
    pub beam_width: Length,
    pub bragg_angle: Angle,
}

impl OverlapGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.beam_width.base() > 0.0) {
            return Err(Error::config(
                "interferometer.beam_width",
                "must be positive",
            ));
        }
        let t = self.bragg_angle.base();
        if !(t > 0.0 && t <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::config(
                "interferometer.bragg_angle",
                "must lie in (0°, 90°]",
            ));
        }
        Ok(())
    }

    /// Beam footprint on the splitter surface, L_v / sin θ_B.
    pub fn max_footprint(&self) -> Length {
        Length::meters(self.beam_width.base() / self.bragg_angle.base().sin())
    }
}

/// Triangular overlap: the normalized self-convolution of a rectangular
/// footprint, 1 − |Δx|/footprint.
impl OverlapProfile for OverlapGeometry {
    fn overlap(&self, dx: Length) -> f64 {
        overlap_factor(self, dx)
    }

    fn support(&self) -> Length {
        self.max_footprint()
    }
}

pub fn overlap_factor(geom: &OverlapGeometry, dx: Length) -> f64 {
    let f = geom.max_footprint().base();
    (1.0 - dx.base().abs() / f).max(0.0)
}

/// Photon numbers leaving toward detector A and detector B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairOutcome {
    /// (2,0)
    BothA,
    /// (1,1)
    Split,
    /// (0,2)
    BothB,
}

impl PairOutcome {
    pub fn counts(self) -> (u32, u32) {
        match self {
            PairOutcome::BothA => (2, 0),
            PairOutcome::Split => (1, 1),
            PairOutcome::BothB => (0, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detector {
    A,
    B,
}

/// Which arms a pair takes after the first splitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathConfig {
    SameArm,
    DifferentArms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRouting {
    pub path_config: PathConfig,
    /// Pair photons left after loss thinning (0, 1 or 2).
    pub loss_survivors: u8,
}

/// Output distribution for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    pub p20: f64,
    pub p11: f64,
    pub p02: f64,
}

impl PairDistribution {
    /// Two photons entering a balanced splitter through one port; no
    /// two-port interference is possible.
    pub const SAME_PORT: PairDistribution = PairDistribution {
        p20: 0.25,
        p11: 0.5,
        p02: 0.25,
    };

    /// Photons in opposite ports with overlap η: P(1,1) = (1 − η²)/2.
    pub fn opposite_ports(eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain(format!(
                "overlap must lie in [0, 1], got {eta}"
            )));
        }
        let e2 = eta * eta;
        Ok(Self {
            p20: 0.25 * (1.0 + e2),
            p11: 0.5 * (1.0 - e2),
            p02: 0.25 * (1.0 + e2),
        })
    }

    /// Maps a uniform variate on [0, 1) to an outcome. The (1,1) interval
    /// comes first, so at fixed `u` raising η can only turn a (1,1) into a
    /// same-port outcome.
    #[inline]
    pub fn pick(&self, u: f64) -> PairOutcome {
        if u < self.p11 {
            PairOutcome::Split
        } else if u < self.p11 + self.p20 {
            PairOutcome::BothA
        } else {
            PairOutcome::BothB
        }
    }
}

pub fn hom_pair_output<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> Result<PairOutcome> {
    Ok(PairDistribution::opposite_ports(eta)?.pick(rng.random()))
}

pub fn same_arm_pair_output<R: Rng + ?Sized>(rng: &mut R) -> PairOutcome {
    PairDistribution::SAME_PORT.pick(rng.random())
}

#[inline]
pub fn route_single<R: Rng + ?Sized>(rng: &mut R) -> Detector {
    if rng.random::<bool>() {
        Detector::A
    } else {
        Detector::B
    }
}

/// Unbiased first splitter: each photon picks an arm independently.
#[inline]
pub fn route_pair<R: Rng + ?Sized>(rng: &mut R) -> PathConfig {
    if rng.random::<bool>() {
        PathConfig::SameArm
    } else {
        PathConfig::DifferentArms
    }
}
