//! Bose–Einstein occupation statistics of a single thermal mode,
//! P_k = n^k / (1 + n)^(k+1), and samplers for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::open_unit;

/// A thermal mode with mean occupation `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalMode {
    mean_occupancy: f64,
}

impl ThermalMode {
    pub fn new(mean_occupancy: f64) -> Result<Self> {
        if !(mean_occupancy >= 0.0 && mean_occupancy.is_finite()) {
            return Err(Error::domain(format!(
                "mean occupancy must be finite and non-negative, got {mean_occupancy}"
            )));
        }
        Ok(Self { mean_occupancy })
    }

    pub fn mean_occupancy(&self) -> f64 {
        self.mean_occupancy
    }

    /// Geometric ratio P_{k+1}/P_k = n/(1+n).
    pub fn ratio(&self) -> f64 {
        let n = self.mean_occupancy;
        n / (1.0 + n)
    }
}

pub fn thermal_pmf(mode: ThermalMode, k: u32) -> f64 {
    let n = mode.mean_occupancy;
    if n == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if k < 512 {
        mode.ratio().powi(k as i32) / (1.0 + n)
    } else {
        (k as f64 * n.ln() - (k as f64 + 1.0) * n.ln_1p()).exp()
    }
}

/// Fraction of occupied modes that hold exactly two photons,
/// P₂/(1 − P₀). Equals 2/9 at n = 2.
///
/// The photon-weighted fraction 2P₂/n is a different number (4/27 at n = 2).
pub fn pair_mode_fraction(mode: ThermalMode) -> Result<f64> {
    if mode.mean_occupancy == 0.0 {
        return Err(Error::domain("no occupied modes at zero mean occupancy"));
    }
    Ok(thermal_pmf(mode, 2) / (1.0 - thermal_pmf(mode, 0)))
}

/// Exact P₂/P₁ = n/(1+n). Its deviation from the small-n approximation
/// P₂/P₁ ≈ n is n²/(1+n).
pub fn small_n_pair_ratio(mode: ThermalMode) -> f64 {
    mode.ratio()
}

/// One draw from the mode's occupation distribution by inverting the
/// geometric CDF.
#[inline]
pub fn sample_occupancy<R: Rng + ?Sized>(mode: ThermalMode, rng: &mut R) -> u32 {
    let n = mode.mean_occupancy;
    if n == 0.0 {
        return 0;
    }
    let ln_ratio = n.ln() - n.ln_1p();
    geometric_failures(open_unit(rng), ln_ratio)
}

/// Number of failures before the first success, where `ln_continue` is the
/// log of the per-trial probability of another failure.
#[inline]
pub(crate) fn geometric_failures(u: f64, ln_continue: f64) -> u32 {
    let k = (u.ln() / ln_continue).floor();
    if k >= u32::MAX as f64 {
        u32::MAX
    } else {
        k as u32
    }
}

/// `modes` independent thermal modes of equal mean occupancy.
///
/// Iterating the occupied modes draws geometric gaps between them instead
/// of visiting every mode, which gives the same joint distribution at a
/// cost proportional to the number of occupied modes.
#[derive(Debug, Clone, Copy)]
pub struct ModeEnsemble {
    mode: ThermalMode,
    modes: u32,
    /// ln P(mode empty) = −ln(1+n)
    ln_empty: f64,
    /// ln(n/(1+n))
    ln_ratio: f64,
}

impl ModeEnsemble {
    pub fn new(mean_photons: f64, modes: u32) -> Result<Self> {
        if modes == 0 {
            return Err(Error::domain("at least one mode is required"));
        }
        let mode = ThermalMode::new(mean_photons / modes as f64)?;
        let n = mode.mean_occupancy;
        Ok(Self {
            mode,
            modes,
            ln_empty: -n.ln_1p(),
            ln_ratio: n.ln() - n.ln_1p(),
        })
    }

    pub fn mode(&self) -> ThermalMode {
        self.mode
    }

    pub fn modes(&self) -> u32 {
        self.modes
    }

    /// Calls `visit(k)` with the occupation k ≥ 1 of every occupied mode,
    /// in mode order.
    #[inline]
    pub fn for_each_occupied<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mut visit: impl FnMut(u32, &mut R),
    ) {
        if self.mode.mean_occupancy == 0.0 {
            return;
        }
        let mut index: u64 = 0;
        loop {
            // empty modes before the next occupied one: failures with
            // continue-probability 1/(1+n)
            let gap = geometric_failures(open_unit(rng), self.ln_empty) as u64;
            index += gap;
            if index >= self.modes as u64 {
                break;
            }
            // given k ≥ 1, k − 1 is again geometric with ratio n/(1+n)
            let k = 1 + geometric_failures(open_unit(rng), self.ln_ratio);
            visit(k, rng);
            index += 1;
        }
    }
}
