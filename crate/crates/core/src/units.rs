//! Unit-carrying scalar types.
//!
//! Every physical quantity is stored in SI (energy in eV) and only converted
//! at the edges: when parsed from a configuration string such as `"8.0 keV"`
//! or when formatted for a report. Parsing is strict, a bare number where a
//! unit is expected is rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("missing unit suffix in {0:?}")]
    MissingUnit(String),
    #[error("unknown unit {unit:?} for {dimension}")]
    UnknownUnit {
        unit: String,
        dimension: &'static str,
    },
    #[error("cannot parse number in {0:?}")]
    BadNumber(String),
}

/// Split `"8.0 keV"` into `(8.0, "keV")`. Whitespace between the number and
/// the unit is optional.
pub fn split_quantity(text: &str) -> Result<(f64, &str), UnitError> {
    let text = text.trim();
    let split = text
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || c == '+'
                || c == '-'
                || ((c == 'e' || c == 'E')
                    && text[i + 1..]
                        .chars()
                        .next()
                        .is_some_and(|n| n.is_ascii_digit() || n == '-' || n == '+')))
        })
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| UnitError::BadNumber(text.to_string()))?;
    let unit = unit.trim();
    if unit.is_empty() {
        return Err(UnitError::MissingUnit(text.to_string()));
    }
    Ok((value, unit))
}

macro_rules! quantity {
    (
        $(#[$meta:meta])*
        $name:ident, $dim:literal, base = $base:literal,
        units { $($unit:literal => $scale:expr),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(f64);

        impl $name {
            /// Construct from a value in base units.
            pub const fn from_base(value: f64) -> Self {
                Self(value)
            }

            /// Value in base units.
            pub const fn base(self) -> f64 {
                self.0
            }

            pub fn parse(text: &str) -> Result<Self, UnitError> {
                let (value, unit) = split_quantity(text)?;
                let scale = match unit {
                    $($unit => $scale,)+
                    other => {
                        return Err(UnitError::UnknownUnit {
                            unit: other.to_string(),
                            dimension: $dim,
                        })
                    }
                };
                Ok(Self(value * scale))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{} {}", self.0, $base)
            }
        }
    };
}

quantity! {
    /// Photon energy, stored in eV.
    Energy, "energy", base = "eV",
    units { "eV" => 1.0, "meV" => 1e-3, "keV" => 1e3 }
}

quantity! {
    /// Length, stored in metres.
    Length, "length", base = "m",
    units {
        "m" => 1.0, "mm" => 1e-3, "um" => 1e-6, "µm" => 1e-6, "μm" => 1e-6,
        "nm" => 1e-9, "Å" => 1e-10, "A" => 1e-10, "angstrom" => 1e-10,
    }
}

quantity! {
    /// Frequency, stored in Hz.
    Frequency, "frequency", base = "Hz",
    units { "Hz" => 1.0, "kHz" => 1e3, "MHz" => 1e6, "GHz" => 1e9 }
}

quantity! {
    /// Time interval, stored in seconds.
    Duration, "time", base = "s",
    units {
        "s" => 1.0, "ms" => 1e-3, "us" => 1e-6, "µs" => 1e-6, "μs" => 1e-6,
        "ns" => 1e-9, "ps" => 1e-12, "fs" => 1e-15,
    }
}

quantity! {
    /// Electric current, stored in amperes.
    Current, "current", base = "A",
    units { "A" => 1.0, "mA" => 1e-3, "uA" => 1e-6, "µA" => 1e-6 }
}

quantity! {
    /// Photon rate, stored in photons per second.
    Rate, "rate", base = "ph/s",
    units { "ph/s" => 1.0, "Hz" => 1.0, "kHz" => 1e3, "MHz" => 1e6 }
}

quantity! {
    /// Plane angle, stored in radians.
    Angle, "angle", base = "rad",
    units {
        "rad" => 1.0, "mrad" => 1e-3, "urad" => 1e-6, "µrad" => 1e-6, "μrad" => 1e-6,
        "deg" => std::f64::consts::PI / 180.0, "°" => std::f64::consts::PI / 180.0,
    }
}

impl Energy {
    pub fn kev(value: f64) -> Self {
        Self(value * 1e3)
    }
    pub fn mev(value: f64) -> Self {
        Self(value * 1e-3)
    }
    pub fn as_kev(self) -> f64 {
        self.0 * 1e-3
    }
    pub fn as_mev(self) -> f64 {
        self.0 * 1e3
    }
}

impl Length {
    pub fn meters(value: f64) -> Self {
        Self(value)
    }
    pub fn mm(value: f64) -> Self {
        Self(value * 1e-3)
    }
    pub fn um(value: f64) -> Self {
        Self(value * 1e-6)
    }
    pub fn angstrom(value: f64) -> Self {
        Self(value * 1e-10)
    }
    pub fn as_mm(self) -> f64 {
        self.0 * 1e3
    }
    pub fn as_um(self) -> f64 {
        self.0 * 1e6
    }
    pub fn as_angstrom(self) -> f64 {
        self.0 * 1e10
    }
}

impl Frequency {
    pub fn hz(value: f64) -> Self {
        Self(value)
    }
    pub fn mhz(value: f64) -> Self {
        Self(value * 1e6)
    }
    pub fn as_hz(self) -> f64 {
        self.0
    }
    pub fn as_mhz(self) -> f64 {
        self.0 * 1e-6
    }
}

impl Duration {
    pub fn seconds(value: f64) -> Self {
        Self(value)
    }
    pub fn ps(value: f64) -> Self {
        Self(value * 1e-12)
    }
    pub fn as_seconds(self) -> f64 {
        self.0
    }
    pub fn as_ps(self) -> f64 {
        self.0 * 1e12
    }
}

impl Current {
    pub fn ma(value: f64) -> Self {
        Self(value * 1e-3)
    }
    pub fn as_ma(self) -> f64 {
        self.0 * 1e3
    }
}

impl Rate {
    pub fn per_second(value: f64) -> Self {
        Self(value)
    }
    pub fn as_per_second(self) -> f64 {
        self.0
    }
}

impl Angle {
    pub fn radians(value: f64) -> Self {
        Self(value)
    }
    pub fn degrees(value: f64) -> Self {
        Self(value.to_radians())
    }
    pub fn urad(value: f64) -> Self {
        Self(value * 1e-6)
    }
    pub fn as_radians(self) -> f64 {
        self.0
    }
    pub fn as_degrees(self) -> f64 {
        self.0.to_degrees()
    }
    pub fn as_urad(self) -> f64 {
        self.0 * 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_space() {
        assert_eq!(Energy::parse("8.0 keV").unwrap(), Energy::kev(8.0));
        assert_eq!(Energy::parse("74meV").unwrap(), Energy::mev(74.0));
        assert_eq!(Frequency::parse("13.0 MHz").unwrap(), Frequency::mhz(13.0));
        assert_eq!(Rate::parse("2.6e7 ph/s").unwrap().as_per_second(), 2.6e7);
        assert!((Length::parse("28 µm").unwrap().as_um() - 28.0).abs() < 1e-12);
        assert!((Length::parse("1.5 Å").unwrap().as_angstrom() - 1.5).abs() < 1e-12);
        assert!((Angle::parse("34.8 deg").unwrap().as_degrees() - 34.8).abs() < 1e-12);
    }

    #[test]
    fn exponent_is_not_a_unit() {
        let (v, u) = split_quantity("1.3e12 ph/s").unwrap();
        assert_eq!(v, 1.3e12);
        assert_eq!(u, "ph/s");
        let (v, u) = split_quantity("2 eV").unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(u, "eV");
    }

    #[test]
    fn rejects_missing_or_wrong_unit() {
        assert!(matches!(
            Energy::parse("8.0"),
            Err(UnitError::MissingUnit(_))
        ));
        assert!(matches!(
            Energy::parse("8.0 mm"),
            Err(UnitError::UnknownUnit { .. })
        ));
        assert!(matches!(
            Length::parse("abc mm"),
            Err(UnitError::BadNumber(_))
        ));
    }
}
