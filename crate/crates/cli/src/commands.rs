use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use homx_core::config::RunConfig;
use homx_core::detector::Calibration;
use homx_core::event_engine::{
    classify_parallel, run_stream_in, thread_pool, CoincidenceCounters, PulseOutcome,
    PulseSimulator,
};
use homx_core::event_file::{count_events, write_simulated, EventReader, RecordType};
use homx_core::rng::StreamKey;
use homx_core::scan_analysis::{
    channel_rates, crosscheck_brightness, estimate_nph_from_dip, fit_dip, fit_peak,
    normalize_to_wings, BrightnessCheck, ChannelSelection, DipFit, FitDiagnostics, ScanResult,
    DEFAULT_AGREEMENT_FACTOR,
};
use homx_core::source_optics::{
    brightness_report, coherence_lengths, BrightnessReport, CoherenceLengths,
};
use homx_core::Error;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::render::{csv, sig, table, Row};
use crate::{load_config, Cli, CliError, ExitCode, Format, DEFAULT_CONFIG};

/// Real-time parity: one classified pulse per bunch at 13 MHz.
pub const REALTIME_PULSES_PER_SECOND: f64 = 1.3e7;

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn pool(cli: &Cli) -> Result<rayon::ThreadPool, CliError> {
    Ok(thread_pool(cli.parallelism)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalcReport {
    pub config_digest: String,
    pub wavelength_angstrom: f64,
    pub duty_cycle: f64,
    pub photons_per_pulse: f64,
    pub bragg_angle_deg: f64,
    pub footprint_um: f64,
    pub coherence: CoherenceLengths,
    pub brightness: BrightnessReport,
}

pub fn calc_report(config: &RunConfig) -> Result<CalcReport, Error> {
    let src = &config.source;
    let geom = &config.interferometer.geometry;
    Ok(CalcReport {
        config_digest: config.digest(),
        wavelength_angstrom: src.wavelength().as_angstrom(),
        duty_cycle: src.duty_cycle(),
        photons_per_pulse: config.beam.photon_rate.as_per_second() / src.bunch_frequency.as_hz(),
        bragg_angle_deg: geom.bragg_angle.as_degrees(),
        footprint_um: geom.max_footprint().as_um(),
        coherence: coherence_lengths(src),
        brightness: brightness_report(&config.beam, src)?,
    })
}

/// Source rows followed by brightness rows, named as in the beamline tables.
pub fn calc_rows(config: &RunConfig, r: &CalcReport) -> Vec<Row> {
    let s = &config.source;
    let b = &config.beam;
    let c = &r.coherence;
    let br = &r.brightness;
    vec![
        Row::new("Photon energy", "keV", sig(s.photon_energy.as_kev())),
        Row::new("Photon wavelength", "Å", sig(r.wavelength_angstrom)),
        Row::new(
            "Energy resolution",
            "meV",
            sig(s.energy_resolution.as_mev()),
        ),
        Row::new("Bunch frequency", "MHz", sig(s.bunch_frequency.as_mhz())),
        Row::new("Stored current", "mA", sig(s.stored_current.as_ma())),
        Row::new(
            "Source size, horizontal",
            "µm (FWHM)",
            sig(s.source_size_h.as_um()),
        ),
        Row::new(
            "Source size, vertical",
            "µm (FWHM)",
            sig(s.source_size_v.as_um()),
        ),
        Row::new(
            "Lateral coherence width (hor.)",
            "µm",
            sig(c.lateral_h.as_um()),
        ),
        Row::new(
            "Lateral coherence width (vert.)",
            "µm",
            sig(c.lateral_v.as_um()),
        ),
        Row::new(
            "Longitudinal coherence length",
            "µm",
            sig(c.longitudinal.as_um()),
        ),
        Row::new("Source distance", "m", sig(s.source_distance.base())),
        Row::new("Bunch duration", "ps (FWHM)", sig(s.bunch_duration.as_ps())),
        Row::new(
            "Photons per second",
            "ph/s",
            sig(b.photon_rate.as_per_second()),
        ),
        Row::new(
            "Hor. slit × vert. slit",
            "mm²",
            format!("{}×{}", sig(b.slit_h.as_mm()), sig(b.slit_v.as_mm())),
        ),
        Row::new("Solid angle", "mrad²", sig(br.solid_angle)),
        Row::new("Source size (rms)", "mm²", sig(br.source_area)),
        Row::new("Bandwidth", "ΔE/E (0.1%)", sig(br.bandwidth_frac)),
        Row::new(
            "Brightness (avg)",
            "ph/s/mrad²/mm²/0.1%BW",
            sig(br.avg_brightness.0),
        ),
        Row::new(
            "Peak brightness",
            "ph/s/mrad²/mm²/0.1%BW",
            sig(br.peak_brightness.0),
        ),
        Row::new("Photon degeneracy", "n_ph", sig(br.degeneracy)),
        Row::new("Duty cycle", "τf", sig(r.duty_cycle)),
        Row::new("Photons per pulse", "ph", sig(r.photons_per_pulse)),
        Row::new("Bragg angle", "deg", sig(r.bragg_angle_deg)),
        Row::new("Splitter footprint", "µm", sig(r.footprint_um)),
    ]
}

pub fn calc(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let report = calc_report(&config)?;
    if cli.out.is_some() {
        write_json(&out_dir(cli)?.join("calc.json"), &report)?;
    }
    match cli.format {
        Format::Json => emit(out, &(serde_json::to_string_pretty(&report)? + "\n")),
        Format::Table => emit(
            out,
            &table("Brightness calculation", &calc_rows(&config, &report)),
        ),
        Format::Csv => emit(out, &csv(&calc_rows(&config, &report))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRates {
    pub photon_pairs_11_hz: f64,
    pub photon_pairs_20_02_hz: f64,
    pub pulses_11_hz: f64,
    pub pulses_20_02_hz: f64,
}

/// Counter export shared by `simulate` and `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterExport {
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub bunch_frequency_hz: f64,
    pub total_pulses: u64,
    pub max_resolvable: u8,
    /// Rows indexed by count_a, columns by count_b.
    pub matrix: Vec<Vec<u64>>,
    pub mean_count_a: f64,
    pub mean_count_b: f64,
    pub rates: ChannelRates,
}

impl CounterExport {
    pub fn new(c: &CoincidenceCounters, config_digest: Option<String>, seed: Option<u64>) -> Self {
        let (pa, pb) = channel_rates(c, ChannelSelection::PhotonPairs);
        let (qa, qb) = channel_rates(c, ChannelSelection::PulseClass);
        let (a, b) = c.detected_photons();
        let n = c.total_pulses().max(1) as f64;
        Self {
            config_digest,
            seed,
            bunch_frequency_hz: c.bunch_frequency_hz(),
            total_pulses: c.total_pulses(),
            max_resolvable: c.max_resolvable(),
            matrix: c.matrix(),
            mean_count_a: a as f64 / n,
            mean_count_b: b as f64 / n,
            rates: ChannelRates {
                photon_pairs_11_hz: pa,
                photon_pairs_20_02_hz: pb,
                pulses_11_hz: qa,
                pulses_20_02_hz: qb,
            },
        }
    }

    pub fn csv(c: &CoincidenceCounters) -> String {
        let mut s = String::from("count_a,count_b,pulses,rate_hz\n");
        for a in 0..=c.max_resolvable() {
            for b in 0..=c.max_resolvable() {
                s.push_str(&format!("{a},{b},{},{}\n", c.cell(a, b), c.rate(a, b)));
            }
        }
        s
    }

    fn rows(&self) -> Vec<Row> {
        let mut rows = vec![
            Row::new("Pulses", "", self.total_pulses.to_string()),
            Row::new("Mean count A", "ph/pulse", sig(self.mean_count_a)),
            Row::new("Mean count B", "ph/pulse", sig(self.mean_count_b)),
            Row::new(
                "(1,1) photon pairs",
                "Hz",
                sig(self.rates.photon_pairs_11_hz),
            ),
            Row::new(
                "(2,0)+(0,2) photon pairs",
                "Hz",
                sig(self.rates.photon_pairs_20_02_hz),
            ),
            Row::new("(1,1) pulses", "Hz", sig(self.rates.pulses_11_hz)),
            Row::new("(2,0)+(0,2) pulses", "Hz", sig(self.rates.pulses_20_02_hz)),
        ];
        if let Some(d) = &self.config_digest {
            rows.push(Row::new("Config digest", "sha256", d.clone()));
        }
        rows
    }
}

fn write_counters(
    dir: &Path,
    c: &CoincidenceCounters,
    export: &CounterExport,
) -> Result<(), CliError> {
    write_json(&dir.join("counters.json"), export)?;
    let path = dir.join("counters.csv");
    fs::write(&path, CounterExport::csv(c))
        .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))
}

fn emit_counters(
    cli: &Cli,
    title: &str,
    c: &CoincidenceCounters,
    export: &CounterExport,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    match cli.format {
        Format::Json => emit(out, &(serde_json::to_string_pretty(export)? + "\n")),
        Format::Table => emit(out, &table(title, &export.rows())),
        Format::Csv => emit(out, &CounterExport::csv(c)),
    }
}

pub fn simulate(cli: &Cli, pulses: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let n = pulses.unwrap_or(config.simulation.n_pulses);
    let sim = PulseSimulator::new(
        config.simulation_config()?,
        StreamKey::new(config.simulation.seed),
    )?;
    let dir = out_dir(cli)?;
    let pool = pool(cli)?;
    let path = dir.join("events.homx");
    let file = File::create(&path)
        .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))?;
    let record_type: RecordType = config.simulation.record_type.into();
    let started = Instant::now();
    let (counters, writer) = write_simulated(
        &sim,
        n,
        record_type,
        BufWriter::with_capacity(1 << 20, file),
        &pool,
    )?;
    writer
        .into_inner()
        .map_err(|e| CliError::new(ExitCode::Io, e.to_string()))?
        .sync_all()?;
    info!(
        "simulated {n} pulses in {:.2} s",
        started.elapsed().as_secs_f64()
    );
    let export = CounterExport::new(
        &counters,
        Some(config.digest()),
        Some(config.simulation.seed),
    );
    write_counters(&dir, &counters, &export)?;
    emit_counters(cli, "Simulated coincidences", &counters, &export, out)
}

pub fn analyze(
    cli: &Cli,
    file: &Path,
    calibration: Option<&Path>,
    max_resolvable: Option<u8>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let cal = calibration.map(Calibration::load).transpose()?;
    let k = max_resolvable
        .or(cal.as_ref().map(Calibration::max_resolvable))
        .or(config.as_ref().map(|c| c.detector.max_resolvable))
        .unwrap_or(homx_core::detector::ApdModel::default().max_resolvable);
    let reader = EventReader::open(file).map_err(|e| match e {
        Error::Io(io) => CliError::new(ExitCode::Io, format!("{}: {io}", file.display())),
        other => other.into(),
    })?;
    if reader.header().record_type == RecordType::AmplitudePair && cal.is_none() {
        return Err(CliError::new(
            ExitCode::Validation,
            format!(
                "{} holds amplitude records; pass --calibration",
                file.display()
            ),
        ));
    }
    let counters = count_events(reader, cal.as_ref(), k, &pool(cli)?)?;
    let export = CounterExport::new(
        &counters,
        config.as_ref().map(RunConfig::digest),
        config.as_ref().map(|c| c.simulation.seed),
    );
    if cli.out.is_some() {
        write_counters(&out_dir(cli)?, &counters, &export)?;
    }
    emit_counters(cli, "Stored coincidences", &counters, &export, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub config_digest: String,
    pub seed: u64,
    pub channels: ChannelSelection,
    pub points: usize,
    pub dip: Option<DipFit>,
    pub peak: Option<DipFit>,
    /// Minimum of the wing-normalized split-pair channel.
    pub normalized_dip_minimum: Option<f64>,
    pub nph_estimate: Option<f64>,
    pub brightness_check: Option<BrightnessCheck>,
    pub error: Option<String>,
    pub diagnostics: Option<FitDiagnostics>,
}

pub fn scan(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let section = config.scan.clone().ok_or_else(|| {
        CliError::new(ExitCode::Validation, "configuration has no [scan] section")
    })?;
    let digest = config.digest();
    let sim = PulseSimulator::new(
        config.simulation_config()?,
        StreamKey::new(config.simulation.seed),
    )?;
    let dir = out_dir(cli)?;
    let started = Instant::now();
    let result = homx_core::scan_analysis::run_scan(
        &sim,
        &config.interferometer.geometry,
        &section.plan,
        &digest,
        &pool(cli)?,
    )?;
    info!(
        "scanned {} points in {:.1} s",
        result.points.len(),
        started.elapsed().as_secs_f64()
    );
    result.save(&dir.join("scan.csv"))?;

    let mut report = ScanReport {
        config_digest: digest,
        seed: config.simulation.seed,
        channels: section.plan.channels,
        points: result.points.len(),
        dip: None,
        peak: None,
        normalized_dip_minimum: None,
        nph_estimate: None,
        brightness_check: None,
        error: None,
        diagnostics: None,
    };
    match normalize_to_wings(&result, section.wing_fraction) {
        Ok(norm) => {
            norm.scan.save(&dir.join("scan_normalized.csv"))?;
            report.normalized_dip_minimum = norm.scan.rate_11().into_iter().reduce(f64::min);
        }
        Err(e) => warn!("normalization skipped: {e}"),
    }

    let failure = if result.points.len() < 2 {
        warn!("single-point scan, fit skipped");
        None
    } else {
        fit_scan(&config, &result, &mut report)
    };
    write_json(&dir.join("fit.json"), &report)?;
    emit_scan(cli, &result, &report, out)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Fills the fit fields; returns the error to exit with, after artifacts
/// have been written.
fn fit_scan(config: &RunConfig, result: &ScanResult, report: &mut ScanReport) -> Option<CliError> {
    let fits = fit_dip(result).and_then(|d| fit_peak(result).map(|p| (d, p)));
    match fits {
        Ok((dip, peak)) => {
            let total = config.beam.photon_rate.as_per_second();
            match estimate_nph_from_dip(dip.depth, total) {
                Ok(n) => {
                    report.nph_estimate = Some(n);
                    report.brightness_check = brightness_report(&config.beam, &config.source)
                        .ok()
                        .map(|b| crosscheck_brightness(n, &b, DEFAULT_AGREEMENT_FACTOR));
                }
                Err(e) => warn!("occupancy estimate skipped: {e}"),
            }
            report.dip = Some(dip);
            report.peak = Some(peak);
            None
        }
        Err(Error::Fit {
            message,
            diagnostics,
        }) => {
            report.error = Some(message.clone());
            report.diagnostics = Some(*diagnostics);
            Some(CliError::new(
                ExitCode::Runtime,
                format!("fit did not converge: {message}"),
            ))
        }
        Err(e) => {
            report.error = Some(e.to_string());
            Some(e.into())
        }
    }
}

fn emit_scan(
    cli: &Cli,
    result: &ScanResult,
    report: &ScanReport,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    match cli.format {
        Format::Json => emit(out, &(serde_json::to_string_pretty(report)? + "\n")),
        Format::Csv => emit(out, &result.to_csv()),
        Format::Table => {
            let mut rows = vec![Row::new("Scan points", "", report.points.to_string())];
            if let Some(d) = &report.dip {
                rows.push(Row::new("Dip baseline", "Hz", sig(d.baseline)));
                rows.push(Row::new(
                    "Dip depth",
                    "Hz",
                    format!("{} ± {}", sig(d.depth), sig(d.errors.depth)),
                ));
                rows.push(Row::new("Dip center", "µm", sig(d.center_um)));
                rows.push(Row::new("Dip half width", "µm", sig(d.half_width_um)));
                rows.push(Row::new("Dip visibility", "", sig(d.visibility)));
            }
            if let Some(p) = &report.peak {
                rows.push(Row::new(
                    "Peak gain",
                    "Hz",
                    format!("{} ± {}", sig(p.depth), sig(p.errors.depth)),
                ));
            }
            if let Some(m) = report.normalized_dip_minimum {
                rows.push(Row::new("Normalized dip minimum", "", format!("{m:.4}")));
            }
            if let Some(n) = report.nph_estimate {
                rows.push(Row::new("Photon degeneracy from dip", "n_ph", sig(n)));
            }
            if let Some(c) = &report.brightness_check {
                rows.push(Row::new(
                    "Photon degeneracy from brightness",
                    "n_ph",
                    sig(c.calculated),
                ));
                rows.push(Row::new(
                    "Agreement",
                    format!("within ×{}", c.agreement_factor),
                    format!(
                        "{} ({})",
                        sig(c.ratio),
                        if c.pass { "pass" } else { "fail" }
                    ),
                ));
            }
            if let Some(e) = &report.error {
                rows.push(Row::new("Fit error", "", e.clone()));
            }
            rows.push(Row::new(
                "Config digest",
                "sha256",
                report.config_digest.clone(),
            ));
            emit(out, &table("Displacement scan", &rows))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub parallelism: usize,
    pub pulses: u64,
    pub seconds: f64,
    pub pulses_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_digest: String,
    pub seed: u64,
    pub target_pulses_per_second: f64,
    pub classify: Vec<BenchRow>,
    pub simulate: Vec<BenchRow>,
    /// Best classify-only rate reaches the real-time target.
    pub classify_meets_target: bool,
}

/// Worker counts 1, 2, 4, … up to `max`, always including `max`.
pub fn parallelism_sweep(max: usize) -> Vec<usize> {
    let max = max.max(1);
    let mut v: Vec<usize> = std::iter::successors(Some(1usize), |p| Some(p * 2))
        .take_while(|&p| p < max)
        .collect();
    v.push(max);
    v
}

/// Classifies `records` outcomes by cycling over a simulated buffer.
pub fn bench_classify(
    buffer: &[PulseOutcome],
    records: u64,
    k: u8,
    f: f64,
    pool: &rayon::ThreadPool,
) -> BenchRow {
    let mut total = CoincidenceCounters::new(k, f);
    let mut done = 0u64;
    let started = Instant::now();
    while done < records {
        let take = (records - done).min(buffer.len() as u64) as usize;
        let c = classify_parallel(&buffer[..take], k, f, pool);
        total.merge_from(&c).expect("same dimensions");
        done += take as u64;
    }
    let seconds = started.elapsed().as_secs_f64();
    assert_eq!(total.total_pulses(), records);
    BenchRow {
        parallelism: pool.current_num_threads(),
        pulses: records,
        seconds,
        pulses_per_second: records as f64 / seconds.max(f64::MIN_POSITIVE),
    }
}

pub fn bench(cli: &Cli, records: u64, pulses: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(_) => load_config(cli)?,
        None => RunConfig::parse(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        config.simulation.seed = seed;
    }
    let sim = PulseSimulator::new(
        config.simulation_config()?,
        StreamKey::new(config.simulation.seed),
    )?;
    let f = sim.config().bunch_frequency_hz;
    let k = sim.max_resolvable();
    let max = if cli.parallelism == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.parallelism
    };
    let buffer_len = records.clamp(1, 1 << 22);
    let setup = thread_pool(max)?;
    let buffer: Vec<PulseOutcome> = setup.install(|| {
        use rayon::prelude::*;
        (0..buffer_len)
            .into_par_iter()
            .map(|i| sim.simulate_pulse(i))
            .collect()
    });

    let mut report = BenchReport {
        config_digest: config.digest(),
        seed: config.simulation.seed,
        target_pulses_per_second: REALTIME_PULSES_PER_SECOND,
        classify: Vec::new(),
        simulate: Vec::new(),
        classify_meets_target: false,
    };
    for p in parallelism_sweep(max) {
        let pool = thread_pool(p)?;
        report
            .classify
            .push(bench_classify(&buffer, records, k, f, &pool));
        let s = run_stream_in(&sim, pulses, &pool)?;
        report.simulate.push(BenchRow {
            parallelism: p,
            pulses,
            seconds: s.elapsed_seconds,
            pulses_per_second: s.pulses_per_second,
        });
    }
    report.classify_meets_target = report
        .classify
        .iter()
        .any(|r| r.pulses_per_second >= REALTIME_PULSES_PER_SECOND);
    if cli.out.is_some() {
        write_json(&out_dir(cli)?.join("bench.json"), &report)?;
    }
    match cli.format {
        Format::Json => emit(out, &(serde_json::to_string_pretty(&report)? + "\n")),
        Format::Csv => {
            let mut s = String::from("path,parallelism,pulses,seconds,pulses_per_second\n");
            for (name, rows) in [
                ("classify", &report.classify),
                ("simulate", &report.simulate),
            ] {
                for r in rows {
                    s.push_str(&format!(
                        "{name},{},{},{},{}\n",
                        r.parallelism, r.pulses, r.seconds, r.pulses_per_second
                    ));
                }
            }
            emit(out, &s)
        }
        Format::Table => {
            let mut rows = Vec::new();
            for (name, list) in [
                ("Classify", &report.classify),
                ("Simulate", &report.simulate),
            ] {
                for r in list {
                    rows.push(Row::new(
                        format!("{name}, {} worker(s)", r.parallelism),
                        "pulses/s",
                        sig(r.pulses_per_second),
                    ));
                }
            }
            rows.push(Row::new(
                "Real-time target",
                "pulses/s",
                format!(
                    "{} ({})",
                    sig(REALTIME_PULSES_PER_SECOND),
                    if report.classify_meets_target {
                        "met"
                    } else {
                        "missed"
                    }
                ),
            ));
            rows.push(Row::new("Seed", "", report.seed.to_string()));
            rows.push(Row::new(
                "Config digest",
                "sha256",
                report.config_digest.clone(),
            ));
            emit(out, &table("Throughput", &rows))
        }
    }
}
