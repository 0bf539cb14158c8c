//! Displacement scans, wing normalization and dip fitting.
//!
//! Every point of a scan replays the same pulse streams (repeat `r` uses
//! `key.derive(r)`), so points differ only through the overlap η(Δx).
//! Points with η = 0 are therefore bit-identical, and the photon-pair
//! channels sum to the same value at every Δx.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_engine::{run_stream_in, CoincidenceCounters, PulseSimulator};
use crate::interferometer::OverlapProfile;
use crate::source_optics::BrightnessReport;
use crate::units::Length;

pub const DEFAULT_WING_FRACTION: f64 = 0.2;
pub const DEFAULT_AGREEMENT_FACTOR: f64 = 2.0;

/// How the coincidence matrix is reduced to the two scan channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    /// Photon pairs within a pulse: a·b split pairs and C(a,2) + C(b,2)
    /// same-detector pairs, summed over the matrix.
    #[default]
    PhotonPairs,
    /// Pulses classified exactly (1,1), and exactly (2,0) or (0,2).
    PulseClass,
}

/// (rate_11, rate_20_02) in Hz.
pub fn channel_rates(counters: &CoincidenceCounters, channels: ChannelSelection) -> (f64, f64) {
    match channels {
        ChannelSelection::PhotonPairs => (
            counters.weighted_rate(|a, b| a * b),
            counters.weighted_rate(|a, b| (a * a.saturating_sub(1) + b * b.saturating_sub(1)) / 2),
        ),
        ChannelSelection::PulseClass => (
            counters.rate(1, 1),
            counters.rate(2, 0) + counters.rate(0, 2),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub dx_um: f64,
    pub rate_11: f64,
    pub rate_20_02: f64,
    pub dwell_s: f64,
    pub repeats: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub seed: u64,
    pub config_digest: String,
    pub channels: ChannelSelection,
    pub bunch_frequency_hz: f64,
    pub pulses_per_repeat: u64,
    /// Rates are dimensionless multiples of the wing mean.
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub points: Vec<ScanPoint>,
    pub metadata: ScanMetadata,
}

pub const CSV_HEADER: &str = "dx_um,rate_11_hz,rate_20_02_hz,dwell_s,repeats";

impl ScanResult {
    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| !(w[1].dx_um > w[0].dx_um)) {
            return Err(Error::domain("scan positions must be strictly increasing"));
        }
        for p in &self.points {
            if !(p.rate_11 >= 0.0 && p.rate_20_02 >= 0.0) {
                return Err(Error::domain(format!(
                    "negative rate at Δx = {} µm",
                    p.dx_um
                )));
            }
            if !(p.dwell_s > 0.0) {
                return Err(Error::domain(format!(
                    "non-positive dwell at Δx = {} µm",
                    p.dx_um
                )));
            }
        }
        Ok(())
    }

    pub fn dx_um(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.dx_um).collect()
    }

    pub fn rate_11(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate_11).collect()
    }

    pub fn rate_20_02(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate_20_02).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.dx_um, p.rate_11, p.rate_20_02, p.dwell_s, p.repeats
            );
        }
        s
    }

    /// Writes `<stem>.csv` and the `<stem>.json` metadata sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        let sidecar = csv_path.with_extension("json");
        fs::write(sidecar, serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(csv_path)?;
        let metadata = serde_json::from_str(&fs::read_to_string(csv_path.with_extension("json"))?)?;
        let points = parse_csv(&text)?;
        let scan = Self { points, metadata };
        scan.validate()?;
        Ok(scan)
    }
}

fn parse_csv(text: &str) -> Result<Vec<ScanPoint>> {
    let mut lines = text.lines();
    let mut offset = 0u64;
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => offset += h.len() as u64 + 1,
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut points = Vec::new();
    for line in lines {
        let bad = |message: String| Error::Format { offset, message };
        if !line.trim().is_empty() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            points.push(ScanPoint {
                dx_um: num(f[0])?,
                rate_11: num(f[1])?,
                rate_20_02: num(f[2])?,
                dwell_s: num(f[3])?,
                repeats: f[4].parse().map_err(|e| bad(format!("`{}`: {e}", f[4])))?,
            });
        }
        offset += line.len() as u64 + 1;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub grid_um: Vec<f64>,
    pub dwell_s: f64,
    pub repeats: u32,
    pub channels: ChannelSelection,
}

impl ScanPlan {
    pub fn validate(&self) -> Result<()> {
        if self.grid_um.is_empty() {
            return Err(Error::config(
                "scan.grid",
                "must contain at least one position",
            ));
        }
        if self.grid_um.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config(
                "scan.grid",
                "positions must be strictly increasing",
            ));
        }
        if !(self.dwell_s > 0.0 && self.dwell_s.is_finite()) {
            return Err(Error::config("scan.dwell", "must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::config("scan.repeats", "must be at least 1"));
        }
        Ok(())
    }

    /// Pulses simulated per repeat: round(dwell·f).
    pub fn pulses_per_repeat(&self, bunch_frequency_hz: f64) -> u64 {
        (self.dwell_s * bunch_frequency_hz).round() as u64
    }
}

/// Runs the engine at every grid position and averages the channel rates
/// over repeats. The overlap in `base`'s configuration is replaced by
/// `profile` at each Δx.
pub fn run_scan(
    base: &PulseSimulator,
    profile: &dyn OverlapProfile,
    plan: &ScanPlan,
    config_digest: &str,
    pool: &rayon::ThreadPool,
) -> Result<ScanResult> {
    plan.validate()?;
    let f = base.config().bunch_frequency_hz;
    let pulses = plan.pulses_per_repeat(f);
    if pulses == 0 {
        return Err(Error::config("scan.dwell", "shorter than one bunch period"));
    }
    let mut points = Vec::with_capacity(plan.grid_um.len());
    for &dx in &plan.grid_um {
        let eta = profile.overlap(Length::um(dx));
        let (mut sum_11, mut sum_20) = (0.0, 0.0);
        for r in 0..plan.repeats {
            let mut config = base.config().clone();
            config.overlap = eta;
            let sim = PulseSimulator::new(config, base.key().derive(r as u64))?;
            let report = run_stream_in(&sim, pulses, pool)?;
            let (r11, r20) = channel_rates(&report.counters, plan.channels);
            sum_11 += r11;
            sum_20 += r20;
        }
        let n = plan.repeats as f64;
        points.push(ScanPoint {
            dx_um: dx,
            rate_11: sum_11 / n,
            rate_20_02: sum_20 / n,
            dwell_s: plan.dwell_s,
            repeats: plan.repeats,
        });
    }
    Ok(ScanResult {
        points,
        metadata: ScanMetadata {
            seed: base.key().seed(),
            config_digest: config_digest.to_owned(),
            channels: plan.channels,
            bunch_frequency_hz: f,
            pulses_per_repeat: pulses,
            normalized: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WingNormalized {
    /// Same positions, rates divided by the per-channel wing mean.
    pub scan: ScanResult,
    pub wing_11: f64,
    pub wing_20_02: f64,
    pub wing_points: usize,
}

/// Number of points taken as wing on each side.
pub fn wing_points(n_points: usize, wing_fraction: f64) -> Result<usize> {
    if !(wing_fraction > 0.0 && wing_fraction <= 0.5) {
        return Err(Error::domain("wing fraction must lie in (0, 0.5]"));
    }
    let k = (n_points as f64 * wing_fraction + 1e-9).floor() as usize;
    if k < 2 {
        return Err(Error::domain(format!(
            "{n_points} points with wing fraction {wing_fraction} leave {k} wing point(s) per side, need 2"
        )));
    }
    Ok(k)
}

/// Mean of the outer `k` values on each side.
pub fn wing_mean(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let sum: f64 = values[..k].iter().chain(&values[n - k..]).sum();
    sum / (2 * k) as f64
}

pub fn normalize_to_wings(scan: &ScanResult, wing_fraction: f64) -> Result<WingNormalized> {
    let k = wing_points(scan.points.len(), wing_fraction)?;
    let wing_11 = wing_mean(&scan.rate_11(), k);
    let wing_20_02 = wing_mean(&scan.rate_20_02(), k);
    if !(wing_11 > 0.0 && wing_20_02 > 0.0) {
        return Err(Error::domain("wing rate is zero; nothing to normalize to"));
    }
    let points = scan
        .points
        .iter()
        .map(|p| ScanPoint {
            rate_11: p.rate_11 / wing_11,
            rate_20_02: p.rate_20_02 / wing_20_02,
            ..*p
        })
        .collect();
    let mut metadata = scan.metadata.clone();
    metadata.normalized = true;
    Ok(WingNormalized {
        scan: ScanResult { points, metadata },
        wing_11,
        wing_20_02,
        wing_points: k,
    })
}

/// Sign of the profile term: a dip is subtracted from the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Dip,
    Peak,
}

impl Polarity {
    fn sign(self) -> f64 {
        match self {
            Polarity::Dip => -1.0,
            Polarity::Peak => 1.0,
        }
    }
}

/// Triangle-squared profile, max(0, 1 − |u|/w)².
pub fn profile_shape(u: f64, half_width: f64) -> f64 {
    let t = (1.0 - u.abs() / half_width).max(0.0);
    t * t
}

/// baseline ± depth·shape(Δx − center).
pub fn profile_model(
    dx: f64,
    baseline: f64,
    depth: f64,
    center: f64,
    half_width: f64,
    polarity: Polarity,
) -> f64 {
    baseline + polarity.sign() * depth * profile_shape(dx - center, half_width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub points: usize,
    pub rss: f64,
    /// rss / (points − 4).
    pub residual_variance: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterErrors {
    pub baseline: f64,
    pub depth: f64,
    /// Absent when the position is not identifiable, e.g. at zero depth.
    pub center_um: Option<f64>,
    pub half_width_um: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipFit {
    pub polarity: Polarity,
    /// Hz, or wing units for a normalized scan.
    pub baseline: f64,
    /// |baseline − model extremum|, ≥ 0.
    pub depth: f64,
    pub center_um: f64,
    /// Distance from the center at which the profile reaches zero.
    pub half_width_um: f64,
    /// depth / baseline.
    pub visibility: f64,
    pub errors: ParameterErrors,
    pub diagnostics: FitDiagnostics,
}

/// Least-squares (baseline, depth) at fixed position and width, with depth
/// constrained to ≥ 0. Returns (baseline, depth, rss).
fn linear_solve(x: &[f64], y: &[f64], center: f64, w: f64, polarity: Polarity) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let s = polarity.sign();
    let (mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let g = s * profile_shape(xi - center, w);
        sg += g;
        sgg += g * g;
        sy += yi;
        sgy += g * yi;
    }
    let det = n * sgg - sg * sg;
    let (mut b, mut d) = (sy / n, 0.0);
    if det > 1e-12 * n * sgg.max(1e-300) {
        let d_ls = (n * sgy - sg * sy) / det;
        if d_ls > 0.0 {
            d = d_ls;
            b = (sy - d * sg) / n;
        }
    }
    let rss = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (b + s * d * profile_shape(xi - center, w));
            r * r
        })
        .sum();
    (b, d, rss)
}

/// Minimizes `f` over two variables with the Nelder–Mead simplex.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    scale: [f64; 2],
    max_iter: usize,
) -> ([f64; 2], f64, usize) {
    let mut simplex = [
        start,
        [start[0] + scale[0], start[1]],
        [start[0], start[1] + scale[1]],
    ];
    let mut values = simplex.map(&f);
    let lerp =
        |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    for iter in 0..max_iter {
        let mut order = [0, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        let spread = (values[2] - values[0]).abs();
        if spread <= 1e-14 * values[0].abs().max(1e-300) {
            return (simplex[0], values[0], iter);
        }
        let centroid = lerp(simplex[0], simplex[1], 0.5);
        let reflected = lerp(centroid, simplex[2], -1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = lerp(centroid, simplex[2], -2.0);
            let fe = f(expanded);
            (simplex[2], values[2]) = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr < values[1] {
            (simplex[2], values[2]) = (reflected, fr);
        } else {
            let contracted = lerp(centroid, simplex[2], 0.5);
            let fc = f(contracted);
            if fc < values[2] {
                (simplex[2], values[2]) = (contracted, fc);
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(simplex[0], simplex[i], 0.5);
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3)
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .unwrap();
    (simplex[best], values[best], max_iter)
}

/// Inverts a symmetric positive-definite matrix by Gauss–Jordan
/// elimination; `None` when a pivot vanishes.
fn invert<const N: usize>(mut a: [[f64; N]; N]) -> Option<[[f64; N]; N]> {
    let mut inv = [[0.0; N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = (0..N).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for k in 0..N {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..N {
            if r != col {
                let factor = a[r][col];
                for k in 0..N {
                    a[r][k] -= factor * a[col][k];
                    inv[r][k] -= factor * inv[col][k];
                }
            }
        }
    }
    Some(inv)
}

fn covariance<const N: usize>(jac: &[[f64; N]], variance: f64) -> Option<[[f64; N]; N]> {
    let mut jtj = [[0.0; N]; N];
    for row in jac {
        for i in 0..N {
            for j in 0..N {
                jtj[i][j] += row[i] * row[j];
            }
        }
    }
    let inv = invert(jtj)?;
    Some(inv.map(|r| r.map(|v| v * variance)))
}

/// Fits the triangle-squared profile to (dx, y). The depth is solved
/// exactly for each trial (center, width); those two are located on a grid
/// and refined with a simplex search.
pub fn fit_profile(dx_um: &[f64], y: &[f64], polarity: Polarity) -> Result<DipFit> {
    const PARAMS: usize = 4;
    let n = dx_um.len();
    let fail = |message: String, rss: f64, iterations: usize| Error::Fit {
        message,
        diagnostics: Box::new(FitDiagnostics {
            points: n,
            rss,
            residual_variance: f64::NAN,
            iterations,
            residuals: Vec::new(),
        }),
    };
    if n != y.len() {
        return Err(Error::domain("position and rate arrays differ in length"));
    }
    if n <= PARAMS {
        return Err(fail(
            format!("{n} points cannot constrain {PARAMS} parameters"),
            f64::NAN,
            0,
        ));
    }
    if y.iter().chain(dx_um).any(|v| !v.is_finite()) {
        return Err(fail("non-finite input".into(), f64::NAN, 0));
    }
    let lo = dx_um.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dx_um.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let min_step = dx_um
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(f64::INFINITY, f64::min);
    let w_min = 0.5 * min_step;
    let w_max = span;

    let rss_at = |p: [f64; 2]| {
        let w = p[1].clamp(w_min, w_max);
        linear_solve(dx_um, y, p[0], w, polarity).2
    };

    let grid = 48;
    let mut best = ([0.5 * (lo + hi), 0.5 * (w_min + w_max)], f64::INFINITY);
    for i in 0..=grid {
        let c = lo + span * i as f64 / grid as f64;
        for j in 0..=grid {
            let w = w_min * (w_max / w_min).powf(j as f64 / grid as f64);
            let r = rss_at([c, w]);
            if r < best.1 {
                best = ([c, w], r);
            }
        }
    }
    let (p, rss, iterations) =
        nelder_mead(rss_at, best.0, [span / grid as f64, best.0[1] * 0.1], 2000);
    if !rss.is_finite() {
        return Err(fail("residual sum is not finite".into(), rss, iterations));
    }
    let center = p[0];
    let w = p[1].clamp(w_min, w_max);
    let (baseline, depth, rss) = linear_solve(dx_um, y, center, w, polarity);
    let s = polarity.sign();
    let residuals: Vec<f64> = dx_um
        .iter()
        .zip(y)
        .map(|(&x, &yi)| yi - profile_model(x, baseline, depth, center, w, polarity))
        .collect();
    let variance = rss / (n - PARAMS) as f64;
    let diagnostics = FitDiagnostics {
        points: n,
        rss,
        residual_variance: variance,
        iterations,
        residuals,
    };
    if !(baseline > 0.0) {
        return Err(Error::Fit {
            message: format!("baseline {baseline} is not positive"),
            diagnostics: Box::new(diagnostics),
        });
    }

    // Analytic Jacobian of the model in (baseline, depth, center, width).
    let jac: Vec<[f64; 4]> = dx_um
        .iter()
        .map(|&x| {
            let u = x - center;
            let t = (1.0 - u.abs() / w).max(0.0);
            let d_center = if t > 0.0 {
                s * depth * 2.0 * t * u.signum() / w
            } else {
                0.0
            };
            let d_width = if t > 0.0 {
                s * depth * 2.0 * t * u.abs() / (w * w)
            } else {
                0.0
            };
            [1.0, s * t * t, d_center, d_width]
        })
        .collect();
    let errors = match covariance(&jac, variance) {
        Some(cov) if depth > 0.0 => ParameterErrors {
            baseline: cov[0][0].sqrt(),
            depth: cov[1][1].sqrt(),
            center_um: Some(cov[2][2].sqrt()),
            half_width_um: Some(cov[3][3].sqrt()),
        },
        _ => {
            let lin: Vec<[f64; 2]> = jac.iter().map(|r| [r[0], r[1]]).collect();
            let cov = covariance(&lin, variance).ok_or_else(|| Error::Fit {
                message: "profile is degenerate with the baseline".into(),
                diagnostics: Box::new(diagnostics.clone()),
            })?;
            ParameterErrors {
                baseline: cov[0][0].sqrt(),
                depth: cov[1][1].sqrt(),
                center_um: None,
                half_width_um: None,
            }
        }
    };
    Ok(DipFit {
        polarity,
        baseline,
        depth,
        center_um: center,
        half_width_um: w,
        visibility: depth / baseline,
        errors,
        diagnostics,
    })
}

/// Dip in the split-pair channel.
pub fn fit_dip(scan: &ScanResult) -> Result<DipFit> {
    fit_profile(&scan.dx_um(), &scan.rate_11(), Polarity::Dip)
}

/// Peak in the same-detector channel.
pub fn fit_peak(scan: &ScanResult) -> Result<DipFit> {
    fit_profile(&scan.dx_um(), &scan.rate_20_02(), Polarity::Peak)
}

/// Mode occupancy from the dip: 2·dip/total rate, the factor 2 undoing the
/// half of the pairs that take the same arm.
pub fn estimate_nph_from_dip(dip_depth_hz: f64, total_photon_rate_hz: f64) -> Result<f64> {
    if !(total_photon_rate_hz > 0.0 && total_photon_rate_hz.is_finite()) {
        return Err(Error::domain("total photon rate must be positive"));
    }
    if !(dip_depth_hz >= 0.0 && dip_depth_hz < total_photon_rate_hz) {
        return Err(Error::domain("dip depth must lie in [0, total rate)"));
    }
    Ok(2.0 * dip_depth_hz / total_photon_rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrightnessCheck {
    pub estimate: f64,
    pub calculated: f64,
    /// estimate / calculated.
    pub ratio: f64,
    pub agreement_factor: f64,
    pub pass: bool,
}

/// Compares a dip-derived occupancy with the brightness calculation;
/// passes when the two agree within `agreement_factor` either way.
pub fn crosscheck_brightness(
    estimate: f64,
    report: &BrightnessReport,
    agreement_factor: f64,
) -> BrightnessCheck {
    let calculated = report.degeneracy;
    let ratio = estimate / calculated;
    let pass = ratio.is_finite()
        && ratio > 0.0
        && ratio <= agreement_factor
        && ratio >= 1.0 / agreement_factor;
    BrightnessCheck {
        estimate,
        calculated,
        ratio,
        agreement_factor,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{ApdModel, Calibration};
    use crate::event_engine::{thread_pool, SimulationConfig};
    use crate::interferometer::OverlapGeometry;
    use crate::rng::StreamKey;
    use crate::units::Angle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn meta() -> ScanMetadata {
        ScanMetadata {
            seed: 1,
            config_digest: "test".into(),
            channels: ChannelSelection::PhotonPairs,
            bunch_frequency_hz: 13e6,
            pulses_per_repeat: 1,
            normalized: false,
        }
    }

    fn scan_from(dx: &[f64], r11: &[f64], r20: &[f64]) -> ScanResult {
        ScanResult {
            points: dx
                .iter()
                .zip(r11.iter().zip(r20))
                .map(|(&dx_um, (&rate_11, &rate_20_02))| ScanPoint {
                    dx_um,
                    rate_11,
                    rate_20_02,
                    dwell_s: 1.0,
                    repeats: 1,
                })
                .collect(),
            metadata: meta(),
        }
    }

    fn grid(n: usize, step: f64) -> Vec<f64> {
        let half = (n / 2) as f64;
        (0..n).map(|i| (i as f64 - half) * step).collect()
    }

    #[test]
    fn pair_channels_from_matrix() {
        let m = vec![vec![0, 0, 1], vec![0, 2, 0], vec![3, 0, 4]];
        let c = CoincidenceCounters::from_matrix(&m, 10.0).unwrap();
        let n = 10.0;
        let (r11, r20) = channel_rates(&c, ChannelSelection::PhotonPairs);
        // a·b: (1,1)·2 + (2,2)·4·4 ; C(a,2)+C(b,2): (0,2)·1 + (2,0)·1·3 + (2,2)·2·4
        assert_relative_eq!(r11, (2.0 + 16.0) * 10.0 / n);
        assert_relative_eq!(r20, (1.0 + 3.0 + 8.0) * 10.0 / n);
        let (p11, p20) = channel_rates(&c, ChannelSelection::PulseClass);
        assert_relative_eq!(p11, 2.0);
        assert_relative_eq!(p20, 4.0);
    }

    #[test]
    fn normalization_arithmetic() {
        let dx = grid(21, 30.0);
        let mut r11 = vec![1.63e6; 21];
        r11[10] = 1.63e6 - 3e4;
        let r20 = vec![1e5; 21];
        let n = normalize_to_wings(&scan_from(&dx, &r11, &r20), DEFAULT_WING_FRACTION).unwrap();
        assert_eq!(n.wing_points, 4);
        assert_relative_eq!(n.scan.points[10].rate_11, 0.98159, epsilon = 1e-5);
        assert!(n.scan.points.iter().all(|p| p.rate_20_02 == 1.0));
    }

    #[test]
    fn insufficient_wings() {
        let dx = grid(9, 30.0);
        let r = vec![1.0; 9];
        assert!(normalize_to_wings(&scan_from(&dx, &r, &r), 0.2).is_err());
        assert!(normalize_to_wings(&scan_from(&dx, &r, &r), 0.25).is_ok());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(values in prop::collection::vec(1.0f64..1e7, 10..40)) {
            let dx: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
            let once = normalize_to_wings(&scan_from(&dx, &values, &values), 0.2).unwrap();
            let twice = normalize_to_wings(&once.scan, 0.2).unwrap();
            prop_assert!((wing_mean(&once.scan.rate_11(), once.wing_points) - 1.0).abs() < 1e-12);
            for (a, b) in once.scan.points.iter().zip(&twice.scan.points) {
                prop_assert!((a.rate_11 - b.rate_11).abs() <= 1e-12 * a.rate_11.abs());
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        let s = scan_from(
            &[-1.5, 0.0, 2.25],
            &[1.0, 0.5, 1.0 / 3.0],
            &[0.0, 7.0, 1e21],
        );
        s.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dx_um,rate_11_hz,rate_20_02_hz,dwell_s,repeats\n"));
        assert_eq!(ScanResult::load(&path).unwrap(), s);
        fs::write(
            &path,
            "dx_um,rate_11_hz,rate_20_02_hz,dwell_s,repeats\n1,2,3\n",
        )
        .unwrap();
        assert!(matches!(
            ScanResult::load(&path),
            Err(Error::Format { offset: 47, .. })
        ));
    }

    fn synthetic(
        dx: &[f64],
        truth: (f64, f64, f64, f64),
        seed: u64,
        polarity: Polarity,
    ) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dx.iter()
            .map(|&x| {
                let m = profile_model(x, truth.0, truth.1, truth.2, truth.3, polarity);
                Poisson::new(m).unwrap().sample(&mut rng)
            })
            .collect()
    }

    #[test]
    fn fit_recovers_generator() {
        let dx = grid(41, 15.0);
        let truth = (1.0e5, 4.0e3, 12.0, 140.0);
        let mut hits = [0usize; 4];
        let trials = 40;
        for seed in 0..trials {
            let y = synthetic(&dx, truth, seed, Polarity::Dip);
            let fit = fit_profile(&dx, &y, Polarity::Dip).unwrap();
            let e = &fit.errors;
            hits[0] += ((fit.baseline - truth.0).abs() < 3.0 * e.baseline) as usize;
            hits[1] += ((fit.depth - truth.1).abs() < 3.0 * e.depth) as usize;
            hits[2] += ((fit.center_um - truth.2).abs() < 3.0 * e.center_um.unwrap()) as usize;
            hits[3] +=
                ((fit.half_width_um - truth.3).abs() < 3.0 * e.half_width_um.unwrap()) as usize;
        }
        // 3σ coverage is 99.7% for a linear model; allow for small-sample σ
        for h in hits {
            assert!(h >= trials as usize - 3, "coverage {hits:?} of {trials}");
        }
    }

    #[test]
    fn fit_peak_polarity() {
        let dx = grid(31, 20.0);
        let y: Vec<f64> = dx
            .iter()
            .map(|&x| profile_model(x, 50.0, 10.0, -20.0, 100.0, Polarity::Peak))
            .collect();
        let fit = fit_profile(&dx, &y, Polarity::Peak).unwrap();
        assert_relative_eq!(fit.baseline, 50.0, epsilon = 1e-6);
        assert_relative_eq!(fit.depth, 10.0, epsilon = 1e-6);
        assert_relative_eq!(fit.center_um, -20.0, epsilon = 1e-4);
        assert_relative_eq!(fit.half_width_um, 100.0, epsilon = 1e-4);
        assert_relative_eq!(fit.visibility, 0.2, epsilon = 1e-8);
    }

    #[test]
    fn zero_depth_is_consistent_with_zero() {
        let dx = grid(21, 30.0);
        let y = synthetic(&dx, (1.0e5, 0.0, 0.0, 1.0), 5, Polarity::Dip);
        let fit = fit_profile(&dx, &y, Polarity::Dip).unwrap();
        assert!(fit.depth >= 0.0);
        assert!(
            fit.depth < 3.0 * fit.errors.depth.max(1e5f64.sqrt()),
            "{fit:?}"
        );
        let flat = vec![7.0; 21];
        let fit = fit_profile(&dx, &flat, Polarity::Dip).unwrap();
        assert_eq!(fit.depth, 0.0);
        assert_eq!(fit.errors.center_um, None);
    }

    #[test]
    fn too_few_points_is_fit_error() {
        let err = fit_profile(&[0.0, 1.0, 2.0], &[1.0, 0.5, 1.0], Polarity::Dip).unwrap_err();
        assert!(matches!(err, Error::Fit { .. }));
    }

    #[test]
    fn nph_estimate() {
        assert_relative_eq!(
            estimate_nph_from_dip(3e4, 2.6e7).unwrap(),
            0.0023077,
            epsilon = 1e-6
        );
        assert_eq!(estimate_nph_from_dip(0.0, 1e3).unwrap(), 0.0);
        assert!(estimate_nph_from_dip(2e3, 1e3).is_err());
        assert!(estimate_nph_from_dip(1.0, 0.0).is_err());
    }

    #[test]
    fn brightness_crosscheck() {
        let mut report = crate::source_optics::brightness_report(
            &crate::presets::hom_beam(),
            &crate::presets::source_8kev(),
        )
        .unwrap();
        report.degeneracy = 0.004;
        let c = crosscheck_brightness(0.0023, &report, DEFAULT_AGREEMENT_FACTOR);
        assert_relative_eq!(c.ratio, 0.575, epsilon = 1e-12);
        assert!(c.pass);
        assert_eq!(crosscheck_brightness(0.004, &report, 2.0).ratio, 1.0);
        assert!(!crosscheck_brightness(0.0, &report, 2.0).pass);
        assert!(!crosscheck_brightness(0.0019, &report, 2.0).pass);
    }

    fn engine(mean_photons: f64, modes: u32, detector: ApdModel, seed: u64) -> PulseSimulator {
        let calibration = Calibration::midpoints(detector.gain_per_photon, detector.max_resolvable);
        let config = SimulationConfig {
            mean_photons,
            modes,
            survival_probability: 1.0,
            overlap: 0.0,
            bunch_frequency_hz: 13e6,
            detector,
            calibration,
        };
        PulseSimulator::new(config, StreamKey::new(seed)).unwrap()
    }

    fn geometry() -> OverlapGeometry {
        OverlapGeometry {
            beam_width: Length::um(80.0),
            bragg_angle: Angle::degrees(34.8),
        }
    }

    fn ideal_detector() -> ApdModel {
        ApdModel {
            gain_per_photon: 1.0,
            gain_dispersion: 0.0,
            electronic_noise: 0.0,
            max_resolvable: 8,
        }
    }

    fn plan(grid_um: Vec<f64>, pulses: u64) -> ScanPlan {
        ScanPlan {
            grid_um,
            dwell_s: pulses as f64 / 13e6,
            repeats: 2,
            channels: ChannelSelection::PhotonPairs,
        }
    }

    #[test]
    fn suppression_balances_conversion() {
        // Common pulse streams make C(a+b, 2) identical at every Δx while
        // nothing saturates or is misread.
        let detector = ApdModel {
            max_resolvable: 40,
            ..ideal_detector()
        };
        let sim = engine(2.0, 50, detector, 11);
        let pool = thread_pool(1).unwrap();
        let scan = run_scan(
            &sim,
            &geometry(),
            &plan(grid(11, 40.0), 100_000),
            "d",
            &pool,
        )
        .unwrap();
        let total = scan.points[0].rate_11 + scan.points[0].rate_20_02;
        for p in &scan.points {
            assert_relative_eq!(p.rate_11 + p.rate_20_02, total, max_relative = 1e-12);
        }
        assert!(scan.points[5].rate_11 < scan.points[0].rate_11);
        // wings beyond the 140 µm footprint replay identical streams
        assert_eq!(
            scan.points[0],
            ScanPoint {
                dx_um: -200.0,
                ..scan.points[1]
            }
        );
        assert_eq!(scan.points[0].rate_11, scan.points[10].rate_11);
    }

    #[test]
    fn balance_with_noisy_detector() {
        let sim = engine(2.0, 50, ApdModel::default(), 12);
        let pool = thread_pool(1).unwrap();
        let scan = run_scan(
            &sim,
            &geometry(),
            &plan(vec![-300.0, -250.0, 0.0, 250.0, 300.0], 200_000),
            "d",
            &pool,
        )
        .unwrap();
        let k = 2;
        let w11 = wing_mean(&scan.rate_11(), k);
        let w20 = wing_mean(&scan.rate_20_02(), k);
        let suppressed = w11 - scan.points[2].rate_11;
        let converted = scan.points[2].rate_20_02 - w20;
        // expected n·μ·f/4 = 0.04·2·13e6/4
        assert!((suppressed - 2.6e5).abs() < 0.1 * 2.6e5, "{suppressed}");
        assert!(
            (suppressed - converted).abs() < 0.01 * suppressed,
            "{suppressed} vs {converted}"
        );
    }

    #[test]
    fn dark_config_gives_flat_scan() {
        let sim = engine(0.0, 50, ApdModel::default(), 3);
        let pool = thread_pool(1).unwrap();
        let scan = run_scan(&sim, &geometry(), &plan(grid(7, 50.0), 50_000), "d", &pool).unwrap();
        assert!(scan
            .points
            .iter()
            .all(|p| p.rate_11 == scan.points[0].rate_11));
        assert_eq!(scan.metadata.pulses_per_repeat, 50_000);
        assert_eq!(scan.metadata.seed, 3);
    }

    #[test]
    fn depth_scales_with_occupancy() {
        // At fixed μ the dip is μ·n·f/4, so halving M doubles it.
        let pool = thread_pool(1).unwrap();
        let at_zero = |modes: u32| {
            let sim = engine(2.0, modes, ideal_detector(), 21);
            let scan = run_scan(
                &sim,
                &geometry(),
                &plan(vec![-300.0, 0.0], 400_000),
                "d",
                &pool,
            )
            .unwrap();
            scan.points[0].rate_11 - scan.points[1].rate_11
        };
        let (d1, d2) = (at_zero(200), at_zero(100));
        let expected = |m: f64| 2.0 * (2.0 / m) * 13e6 / 4.0;
        // The difference counts split pairs at η = 0, about Poisson with
        // mean N·μ·n/4 per repeat; two repeats are averaged.
        let n: f64 = 400_000.0;
        for (d, m) in [(d1, 200.0), (d2, 100.0)] {
            let sd = 13e6 / n * (n * 2.0 * (2.0 / m) / 4.0 / 2.0).sqrt();
            assert!(
                (d - expected(m)).abs() < 4.0 * sd,
                "depth {d} vs {} ± {sd}",
                expected(m)
            );
        }
        assert!((d2 / d1 - 2.0).abs() < 0.2, "ratio {}", d2 / d1);
    }
}
