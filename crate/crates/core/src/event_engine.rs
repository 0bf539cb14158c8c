//! Per-pulse simulation and coincidence counting.
//!
//! A pulse is simulated by drawing the occupations of `modes` independent
//! thermal modes, routing the photons through the interferometer, and
//! digitizing the two APD amplitudes. Each pulse reads only its own random
//! substream, so results do not depend on batch size or worker count.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{digitize, synthesize_amplitude, ApdModel, Calibration};
use crate::error::{Error, Result};
use crate::interferometer::{route_pair, route_single, Detector, PairDistribution, PathConfig};
use crate::photon_stats::ModeEnsemble;
use crate::rng::{PulseRng, StreamKey};

/// Pulses per work unit.
pub const BATCH_SIZE: u64 = 1 << 16;

pub const FLAG_SATURATION_A: u8 = 0b01;
pub const FLAG_SATURATION_B: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PulseOutcome {
    pub pulse_index: u64,
    pub count_a: u8,
    pub count_b: u8,
    pub flags: u8,
}

impl PulseOutcome {
    pub fn saturated_a(&self) -> bool {
        self.flags & FLAG_SATURATION_A != 0
    }
    pub fn saturated_b(&self) -> bool {
        self.flags & FLAG_SATURATION_B != 0
    }
}

/// Raw APD amplitudes for one pulse, as stored in amplitude-type event files.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AmplitudeRecord {
    pub pulse_index: u64,
    pub amplitude_a: f32,
    pub amplitude_b: f32,
}

impl AmplitudeRecord {
    pub fn digitize(&self, cal: &Calibration) -> PulseOutcome {
        let (count_a, sat_a) = digitize(cal, self.amplitude_a as f64);
        let (count_b, sat_b) = digitize(cal, self.amplitude_b as f64);
        PulseOutcome {
            pulse_index: self.pulse_index,
            count_a,
            count_b,
            flags: ((sat_a as u8) * FLAG_SATURATION_A) | ((sat_b as u8) * FLAG_SATURATION_B),
        }
    }
}

/// Histogram over (count_a, count_b) with the pulse total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceCounters {
    max_resolvable: u8,
    bunch_frequency_hz: f64,
    total_pulses: u64,
    /// Row-major, `(max_resolvable + 1)²` cells; row = count_a.
    cells: Vec<u64>,
}

impl CoincidenceCounters {
    pub fn new(max_resolvable: u8, bunch_frequency_hz: f64) -> Self {
        let dim = max_resolvable as usize + 1;
        Self {
            max_resolvable,
            bunch_frequency_hz,
            total_pulses: 0,
            cells: vec![0; dim * dim],
        }
    }

    pub fn max_resolvable(&self) -> u8 {
        self.max_resolvable
    }

    pub fn dim(&self) -> usize {
        self.max_resolvable as usize + 1
    }

    pub fn bunch_frequency_hz(&self) -> f64 {
        self.bunch_frequency_hz
    }

    pub fn total_pulses(&self) -> u64 {
        self.total_pulses
    }

    /// Beam time covered, total_pulses / f.
    pub fn elapsed_seconds(&self) -> f64 {
        self.total_pulses as f64 / self.bunch_frequency_hz
    }

    pub fn cell(&self, a: u8, b: u8) -> u64 {
        self.cells[a as usize * self.dim() + b as usize]
    }

    pub fn cells(&self) -> &[u64] {
        &self.cells
    }

    /// Rows of the matrix, indexed by count_a.
    pub fn matrix(&self) -> Vec<Vec<u64>> {
        self.cells.chunks(self.dim()).map(<[u64]>::to_vec).collect()
    }

    pub fn from_matrix(matrix: &[Vec<u64>], bunch_frequency_hz: f64) -> Result<Self> {
        let dim = matrix.len();
        if !(2..=256).contains(&dim) || matrix.iter().any(|r| r.len() != dim) {
            return Err(Error::domain(
                "counter matrix must be square with 2..=256 rows",
            ));
        }
        let cells: Vec<u64> = matrix.iter().flatten().copied().collect();
        Ok(Self {
            max_resolvable: (dim - 1) as u8,
            bunch_frequency_hz,
            total_pulses: cells.iter().sum(),
            cells,
        })
    }

    /// Pulses in cell (a, b) per second of beam time: count·f/N.
    pub fn rate(&self, a: u8, b: u8) -> f64 {
        if self.total_pulses == 0 {
            return 0.0;
        }
        self.cell(a, b) as f64 * self.bunch_frequency_hz / self.total_pulses as f64
    }

    /// Σ over cells of weight(a, b)·count, converted to a rate.
    pub fn weighted_rate(&self, weight: impl Fn(u64, u64) -> u64) -> f64 {
        if self.total_pulses == 0 {
            return 0.0;
        }
        let dim = self.dim();
        let sum: u64 = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, &c)| c * weight((i / dim) as u64, (i % dim) as u64))
            .sum();
        sum as f64 * self.bunch_frequency_hz / self.total_pulses as f64
    }

    /// Detected photons summed over all pulses, per detector.
    pub fn detected_photons(&self) -> (u64, u64) {
        let dim = self.dim();
        self.cells
            .iter()
            .enumerate()
            .fold((0, 0), |(a, b), (i, &c)| {
                (a + c * (i / dim) as u64, b + c * (i % dim) as u64)
            })
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<()> {
        if self.max_resolvable != other.max_resolvable {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        if self.bunch_frequency_hz != other.bunch_frequency_hz {
            return Err(Error::domain(
                "counters recorded at different bunch frequencies",
            ));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
        self.total_pulses += other.total_pulses;
        Ok(())
    }
}

/// Increments the cell for `outcome`. Counts above the matrix size land in
/// the last row/column.
#[inline]
pub fn classify(outcome: &PulseOutcome, counters: &mut CoincidenceCounters) {
    let k = counters.max_resolvable;
    let dim = counters.dim();
    let idx = outcome.count_a.min(k) as usize * dim + outcome.count_b.min(k) as usize;
    counters.cells[idx] += 1;
    counters.total_pulses += 1;
}

pub fn classify_all<'a>(
    outcomes: impl IntoIterator<Item = &'a PulseOutcome>,
    counters: &mut CoincidenceCounters,
) {
    for o in outcomes {
        classify(o, counters);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Mean photons per pulse summed over all modes.
    pub mean_photons: f64,
    pub modes: u32,
    pub survival_probability: f64,
    /// Mode overlap at the final splitter.
    pub overlap: f64,
    pub bunch_frequency_hz: f64,
    pub detector: ApdModel,
    pub calibration: Calibration,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_photons >= 0.0 && self.mean_photons.is_finite()) {
            return Err(Error::config(
                "simulation.mean_photons",
                "must be non-negative",
            ));
        }
        if self.modes == 0 {
            return Err(Error::config("simulation.modes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.survival_probability) {
            return Err(Error::config(
                "beam.survival_probability",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::config(
                "interferometer.overlap",
                "must lie in [0, 1]",
            ));
        }
        if !(self.bunch_frequency_hz > 0.0) {
            return Err(Error::config("source.bunch_frequency", "must be positive"));
        }
        self.detector.validate()?;
        self.calibration.validate()?;
        Ok(())
    }

    pub fn max_resolvable(&self) -> u8 {
        self.calibration.max_resolvable()
    }
}

/// Photon numbers reaching each detector before digitization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhotonCounts {
    pub a: u32,
    pub b: u32,
    /// Photons emitted into the interferometer.
    pub generated: u32,
}

/// Prepared simulator for one configuration and seed.
#[derive(Debug, Clone)]
pub struct PulseSimulator {
    config: SimulationConfig,
    ensemble: ModeEnsemble,
    hom: PairDistribution,
    key: StreamKey,
}

impl PulseSimulator {
    pub fn new(config: SimulationConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let ensemble = ModeEnsemble::new(config.mean_photons, config.modes)?;
        let hom = PairDistribution::opposite_ports(config.overlap)?;
        Ok(Self {
            config,
            ensemble,
            hom,
            key,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn key(&self) -> &StreamKey {
        &self.key
    }

    /// Same simulator with a different overlap; pulse streams are shared.
    pub fn with_overlap(&self, overlap: f64) -> Result<Self> {
        let mut config = self.config.clone();
        config.overlap = overlap;
        Self::new(config, self.key.clone())
    }

    #[inline]
    fn survives(&self, rng: &mut PulseRng) -> bool {
        let s = self.config.survival_probability;
        s >= 1.0 || (s > 0.0 && rng.random::<f64>() < s)
    }

    #[inline]
    fn single(&self, rng: &mut PulseRng, counts: &mut PhotonCounts) {
        if self.survives(rng) {
            match route_single(rng) {
                Detector::A => counts.a += 1,
                Detector::B => counts.b += 1,
            }
        }
    }

    /// True photon numbers at the detectors. Occupations k ≥ 3 are treated
    /// as one interfering pair plus k − 2 independent photons.
    #[inline]
    pub fn simulate_photons(&self, rng: &mut PulseRng) -> PhotonCounts {
        let mut counts = PhotonCounts::default();
        self.ensemble.for_each_occupied(rng, |k, rng| {
            counts.generated += k;
            if k == 1 {
                self.single(rng, &mut counts);
                return;
            }
            let path = route_pair(rng);
            let first = self.survives(rng);
            let second = self.survives(rng);
            match (first, second) {
                (true, true) => {
                    let u: f64 = rng.random();
                    let outcome = match path {
                        PathConfig::SameArm => PairDistribution::SAME_PORT.pick(u),
                        PathConfig::DifferentArms => self.hom.pick(u),
                    };
                    let (a, b) = outcome.counts();
                    counts.a += a;
                    counts.b += b;
                }
                (true, false) | (false, true) => match route_single(rng) {
                    Detector::A => counts.a += 1,
                    Detector::B => counts.b += 1,
                },
                (false, false) => {}
            }
            for _ in 2..k {
                self.single(rng, &mut counts);
            }
        });
        counts
    }

    /// Amplitudes as the APDs would report them, rounded to f32.
    #[inline]
    pub fn simulate_amplitudes(&self, pulse_index: u64) -> AmplitudeRecord {
        let mut rng = self.key.substream(pulse_index);
        let counts = self.simulate_photons(&mut rng);
        let det = &self.config.detector;
        let amplitude_a = synthesize_amplitude(det, counts.a, &mut rng) as f32;
        let amplitude_b = synthesize_amplitude(det, counts.b, &mut rng) as f32;
        AmplitudeRecord {
            pulse_index,
            amplitude_a,
            amplitude_b,
        }
    }

    #[inline]
    pub fn simulate_pulse(&self, pulse_index: u64) -> PulseOutcome {
        self.simulate_amplitudes(pulse_index)
            .digitize(&self.config.calibration)
    }

    pub fn new_counters(&self) -> CoincidenceCounters {
        CoincidenceCounters::new(self.max_resolvable(), self.config.bunch_frequency_hz)
    }

    pub fn max_resolvable(&self) -> u8 {
        self.config.max_resolvable()
    }

    fn count_range(&self, start: u64, end: u64) -> CoincidenceCounters {
        let mut counters = self.new_counters();
        for i in start..end {
            classify(&self.simulate_pulse(i), &mut counters);
        }
        counters
    }
}

/// Free-function form of [`PulseSimulator::simulate_pulse`].
pub fn simulate_pulse(sim: &PulseSimulator, pulse_index: u64) -> PulseOutcome {
    sim.simulate_pulse(pulse_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub counters: CoincidenceCounters,
    pub pulses: u64,
    pub parallelism: usize,
    pub elapsed_seconds: f64,
    pub pulses_per_second: f64,
}

/// Builds a worker pool of the requested size (0 = one per core).
pub fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))
}

/// Batch index ranges covering `0..n_pulses`.
pub fn batches(n_pulses: u64) -> impl IndexedParallelIterator<Item = (u64, u64)> {
    let n_batches = usize::try_from(n_pulses.div_ceil(BATCH_SIZE)).expect("batch count fits usize");
    (0..n_batches).into_par_iter().map(move |b| {
        let start = b as u64 * BATCH_SIZE;
        (start, (start + BATCH_SIZE).min(n_pulses))
    })
}

/// Simulates and classifies pulses `0..n_pulses` on `parallelism` workers.
pub fn run_stream(sim: &PulseSimulator, n_pulses: u64, parallelism: usize) -> Result<StreamReport> {
    let pool = thread_pool(parallelism)?;
    run_stream_in(sim, n_pulses, &pool)
}

pub fn run_stream_in(
    sim: &PulseSimulator,
    n_pulses: u64,
    pool: &rayon::ThreadPool,
) -> Result<StreamReport> {
    let started = Instant::now();
    let counters = pool.install(|| {
        batches(n_pulses)
            .map(|(start, end)| sim.count_range(start, end))
            .reduce(
                || sim.new_counters(),
                |mut a, b| {
                    a.merge_from(&b).expect("same simulator");
                    a
                },
            )
    });
    let elapsed = started.elapsed().as_secs_f64();
    Ok(StreamReport {
        pulses: n_pulses,
        parallelism: pool.current_num_threads(),
        elapsed_seconds: elapsed,
        pulses_per_second: if elapsed > 0.0 {
            n_pulses as f64 / elapsed
        } else {
            f64::INFINITY
        },
        counters,
    })
}

/// Classifies stored outcomes in parallel batches.
pub fn classify_parallel(
    outcomes: &[PulseOutcome],
    max_resolvable: u8,
    bunch_frequency_hz: f64,
    pool: &rayon::ThreadPool,
) -> CoincidenceCounters {
    pool.install(|| {
        outcomes
            .par_chunks(BATCH_SIZE as usize)
            .map(|chunk| {
                let mut c = CoincidenceCounters::new(max_resolvable, bunch_frequency_hz);
                classify_all(chunk, &mut c);
                c
            })
            .reduce(
                || CoincidenceCounters::new(max_resolvable, bunch_frequency_hz),
                |mut a, b| {
                    a.merge_from(&b).expect("same dimensions");
                    a
                },
            )
    })
}
