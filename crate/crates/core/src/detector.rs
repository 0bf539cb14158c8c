//! Photon-number-resolving APD: amplitude synthesis, pulse-height
//! histograms, threshold calibration and conversion to integer counts.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian single-photon response. Gain dispersion and electronic noise add
/// in quadrature, so k photons give an amplitude with mean k·g and standard
/// deviation √(k·(g·d)² + σ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApdModel {
    pub gain_per_photon: f64,
    /// Relative standard deviation of the single-photon gain.
    pub gain_dispersion: f64,
    /// Absolute standard deviation of the additive noise.
    pub electronic_noise: f64,
    pub max_resolvable: u8,
}

impl Default for ApdModel {
    fn default() -> Self {
        Self {
            gain_per_photon: 1.0,
            gain_dispersion: 0.05,
            electronic_noise: 0.1,
            max_resolvable: 8,
        }
    }
}

impl ApdModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_per_photon > 0.0 && self.gain_per_photon.is_finite()) {
            return Err(Error::config(
                "detector.gain_per_photon",
                "must be positive",
            ));
        }
        if !(self.gain_dispersion >= 0.0) {
            return Err(Error::config(
                "detector.gain_dispersion",
                "must be non-negative",
            ));
        }
        if !(self.electronic_noise >= 0.0) {
            return Err(Error::config(
                "detector.electronic_noise",
                "must be non-negative",
            ));
        }
        if self.max_resolvable < 2 {
            return Err(Error::config(
                "detector.max_resolvable",
                "must be at least 2",
            ));
        }
        Ok(())
    }

    /// Output ceiling of the amplifier chain.
    pub fn saturation_amplitude(&self) -> f64 {
        (self.max_resolvable as f64 + 1.0) * self.gain_per_photon
    }

    #[inline]
    fn spread(&self, count: u32) -> f64 {
        let gd = self.gain_per_photon * self.gain_dispersion;
        (count as f64 * gd * gd + self.electronic_noise * self.electronic_noise).sqrt()
    }
}

#[inline]
pub fn synthesize_amplitude<R: Rng + ?Sized>(
    model: &ApdModel,
    true_count: u32,
    rng: &mut R,
) -> f64 {
    let mean = true_count as f64 * model.gain_per_photon;
    let sd = model.spread(true_count);
    let amp = if sd > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        mean + sd * z
    } else {
        mean
    };
    amp.min(model.saturation_amplitude())
}

/// Fixed-width pulse-height histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeHistogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl AmplitudeHistogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::domain(
                "histogram needs hi > lo and at least one bin",
            ));
        }
        Ok(Self {
            lo,
            bin_width: (hi - lo) / bins as f64,
            counts: vec![0; bins],
        })
    }

    /// Adds an amplitude. Values outside the range land in the edge bins.
    pub fn fill(&mut self, amplitude: f64) {
        let i = ((amplitude - self.lo) / self.bin_width).floor();
        let i = if i < 0.0 {
            0
        } else {
            (i as usize).min(self.counts.len() - 1)
        };
        self.counts[i] += 1;
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Two-column CSV: `bin_center,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_center,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{}", self.bin_center(i), c)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut centers = Vec::new();
        let mut counts = Vec::new();
        for (line_no, line) in input.lines().enumerate() {
            let line = line?;
            if line_no == 0 || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format {
                offset: line_no as u64,
                message: format!("bad histogram row {line:?}"),
            };
            let (c, n) = line.split_once(',').ok_or_else(bad)?;
            centers.push(c.trim().parse::<f64>().map_err(|_| bad())?);
            counts.push(n.trim().parse::<u64>().map_err(|_| bad())?);
        }
        if centers.len() < 2 {
            return Err(Error::Format {
                offset: 0,
                message: "histogram needs at least two bins".into(),
            });
        }
        let bin_width = centers[1] - centers[0];
        Ok(Self {
            lo: centers[0] - 0.5 * bin_width,
            bin_width,
            counts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    /// Thresholds at histogram minima between resolved peaks.
    Valleys,
    /// Thresholds at (k + ½)·gain.
    Midpoints,
}

/// Amplitude cut points t₁ < t₂ < … < t_K. An amplitude below t₁ is zero
/// photons, one in [t_k, t_{k+1}) is k photons, and one at or above t_K is
/// reported as K with the saturation flag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: Vec<f64>,
    pub gain: f64,
    pub method: CalibrationMethod,
    #[serde(default)]
    pub peaks_found: usize,
    #[serde(skip)]
    pub source_histogram: Option<AmplitudeHistogram>,
}

impl Calibration {
    pub fn midpoints(gain: f64, max_resolvable: u8) -> Self {
        Self {
            thresholds: (0..max_resolvable)
                .map(|k| (k as f64 + 0.5) * gain)
                .collect(),
            gain,
            method: CalibrationMethod::Midpoints,
            peaks_found: 0,
            source_histogram: None,
        }
    }

    pub fn max_resolvable(&self) -> u8 {
        self.thresholds.len() as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() < 2 || self.thresholds.len() > u8::MAX as usize {
            return Err(Error::Calibration(
                "need between 2 and 255 thresholds".into(),
            ));
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Calibration(
                "thresholds must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let cal: Calibration = serde_json::from_reader(std::io::BufReader::new(file))?;
        cal.validate()?;
        Ok(cal)
    }
}

/// Count and saturation flag.
#[inline]
pub fn digitize(cal: &Calibration, amplitude: f64) -> (u8, bool) {
    let k = cal
        .thresholds
        .iter()
        .take_while(|&&t| amplitude >= t)
        .count() as u8;
    (k, k == cal.max_resolvable())
}

/// Places thresholds at the minima between peaks of a pulse-height
/// histogram. Where neighbouring peaks are not resolved, the threshold
/// falls back to (k + ½)·gain. Works in bin-index space, so scaling the
/// histogram axis and the hint scales the thresholds by the same factor.
pub fn calibrate(
    hist: &AmplitudeHistogram,
    gain_hint: Option<f64>,
    max_resolvable: u8,
) -> Result<Calibration> {
    if max_resolvable < 2 {
        return Err(Error::Calibration(
            "max_resolvable must be at least 2".into(),
        ));
    }
    if hist.total() == 0 {
        return Err(Error::Calibration("empty histogram".into()));
    }
    if let Some(g) = gain_hint {
        if !(g > 0.0) {
            return Err(Error::Calibration("gain hint must be positive".into()));
        }
    }
    let sigma_bins = gain_hint
        .map(|g| (0.03 * g / hist.bin_width).max(1.0))
        .unwrap_or(2.0);
    let smooth = gaussian_smooth(&hist.counts, sigma_bins);
    let peaks = resolved_peaks(&smooth);

    let fallback = |gain: f64, peaks_found: usize| Calibration {
        peaks_found,
        source_histogram: Some(hist.clone()),
        ..Calibration::midpoints(gain, max_resolvable)
    };

    if peaks.len() < 2 {
        return match (peaks.len(), gain_hint) {
            (0, _) => Err(Error::Calibration("flat histogram, no peaks found".into())),
            (_, Some(g)) => Ok(fallback(g, peaks.len())),
            (_, None) => Err(Error::Calibration(
                "single peak and no gain hint; cannot infer the photon spacing".into(),
            )),
        };
    }

    let positions: Vec<f64> = peaks.iter().map(|&i| hist.bin_center(i)).collect();
    let gain = gain_hint.unwrap_or_else(|| {
        let mut spacings: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
        spacings.sort_by(|a, b| a.total_cmp(b));
        spacings[spacings.len() / 2]
    });

    let mut thresholds: Vec<f64> = (0..max_resolvable)
        .map(|k| (k as f64 + 0.5) * gain)
        .collect();
    for w in peaks.windows(2) {
        let k_lo = (hist.bin_center(w[0]) / gain).round();
        let k_hi = (hist.bin_center(w[1]) / gain).round();
        if k_lo < 0.0 || k_hi != k_lo + 1.0 || k_lo >= max_resolvable as f64 {
            continue;
        }
        thresholds[k_lo as usize] = valley_position(hist, &smooth, w[0], w[1]);
    }
    if !thresholds.windows(2).all(|w| w[0] < w[1]) {
        return Ok(fallback(gain, peaks.len()));
    }
    Ok(Calibration {
        thresholds,
        gain,
        method: CalibrationMethod::Valleys,
        peaks_found: peaks.len(),
        source_histogram: Some(hist.clone()),
    })
}

fn gaussian_smooth(counts: &[u64], sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|j| (-0.5 * (j as f64 / sigma).powi(2)).exp())
        .collect();
    let n = counts.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, w) in (-half..=half).zip(&kernel) {
                let idx = i + j;
                if (0..n).contains(&idx) {
                    acc += w * counts[idx as usize] as f64;
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Local maxima that stand out from the valleys separating them.
fn resolved_peaks(smooth: &[f64]) -> Vec<usize> {
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let floor = (1e-3 * max).max(5.0);
    let n = smooth.len();
    let candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i == 0 {
                f64::NEG_INFINITY
            } else {
                smooth[i - 1]
            };
            let right = if i + 1 == n {
                f64::NEG_INFINITY
            } else {
                smooth[i + 1]
            };
            smooth[i] >= floor && smooth[i] > left && smooth[i] >= right
        })
        .collect();
    // a constant histogram has no strict local maximum; neither does a ramp
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        match kept.last().copied() {
            None => kept.push(c),
            Some(p) => {
                let valley = smooth[p..=c].iter().cloned().fold(f64::INFINITY, f64::min);
                if valley <= 0.5 * smooth[p].min(smooth[c]) {
                    kept.push(c);
                } else if smooth[c] > smooth[p] {
                    *kept.last_mut().unwrap() = c;
                }
            }
        }
    }
    // an isolated maximum on a flat background is not a mode
    kept.retain(|&i| smooth[i] > 1.5 * edge_level(smooth));
    kept
}

fn edge_level(smooth: &[f64]) -> f64 {
    let min = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    min.max(0.0)
}

fn valley_position(hist: &AmplitudeHistogram, smooth: &[f64], a: usize, b: usize) -> f64 {
    let min = smooth[a..=b].iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * smooth[a].max(smooth[b]);
    let first = (a..=b).find(|&i| smooth[i] <= min + tol).unwrap();
    let last = (a..=b).rev().find(|&i| smooth[i] <= min + tol).unwrap();
    let mid = 0.5 * (first + last) as f64;
    hist.lo + (mid + 0.5) * hist.bin_width
}
