use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use homx_core::detector::Calibration;
use serde_json::Value;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn homx() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_homx"));
    cmd.env_remove("HOMX_CONFIG");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn homx")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).expect("json")
}

fn write_config(dir: &Path, base: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = fs::read_to_string(config_path(base)).unwrap();
    let path = dir.join("run.toml");
    fs::write(&path, edit(text)).unwrap();
    path
}

#[test]
fn calc_table_lists_the_chain() {
    let out = ok(homx()
        .arg("--config")
        .arg(config_path("full-beam.toml"))
        .arg("calc"));
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "Photons per second",
        "Solid angle",
        "Brightness (avg)",
        "Peak brightness",
        "Photon degeneracy",
        "8.16e-4",
        "1.79e21",
        "6.00e23",
    ] {
        assert!(text.contains(needle), "missing {needle:?} in\n{text}");
    }
}

#[test]
fn calc_csv_has_header() {
    let out = ok(homx()
        .arg("--config")
        .arg(config_path("hom-beam.toml"))
        .args(["--format", "csv", "calc"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("quantity,units,value\n"));
    assert!(text.contains("Photon degeneracy"));
}

#[test]
fn config_from_environment() {
    let out = ok(homx()
        .env("HOMX_CONFIG", config_path("hom-beam.toml"))
        .args(["--format", "json", "calc"]));
    let report = json(&out.stdout);
    let n = report["brightness"]["degeneracy"].as_f64().unwrap();
    assert!((n - 3.73e-3).abs() < 1e-5);
}

#[test]
fn missing_unit_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "hom-beam.toml", |t| {
        t.replace("photon_energy = \"8.0 keV\"", "photon_energy = 8.0")
    });
    let out = run(homx().arg("--config").arg(&path).arg("calc"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("source.photon_energy"), "{err}");
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = run(homx().arg("calc"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreadable_config_is_an_io_error() {
    let out = run(homx().args(["--config", "/nonexistent/run.toml", "calc"]));
    assert_eq!(out.status.code(), Some(3));
}

fn simulate_into(dir: &Path, config: &Path, pulses: &str, extra: &[&str]) -> Value {
    ok(homx()
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .args(extra)
        .args(["simulate", "--pulses", pulses]));
    json(&fs::read(dir.join("counters.json")).unwrap())
}

#[test]
fn simulate_is_reproducible_and_seedable() {
    let config = config_path("hom-beam.toml");
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = simulate_into(dirs[0].path(), &config, "200000", &[]);
    let b = simulate_into(dirs[1].path(), &config, "200000", &["--parallelism", "3"]);
    let c = simulate_into(dirs[2].path(), &config, "200000", &["--seed", "99"]);
    let file = |i: usize| fs::read(dirs[i].path().join("events.homx")).unwrap();
    assert_eq!(file(0), file(1));
    assert_ne!(file(0), file(2));
    assert_eq!(a["matrix"], b["matrix"]);
    assert_ne!(a["matrix"], c["matrix"]);
    assert_eq!(c["seed"], 99);
    assert_eq!(file(0).len(), 32 + 16 * 200_000);
    let csv = fs::read_to_string(dirs[0].path().join("counters.csv")).unwrap();
    assert!(csv.starts_with("count_a,count_b,pulses,rate_hz\n"));
}

#[test]
fn zero_pulses_give_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let counters = simulate_into(dir.path(), &config_path("hom-beam.toml"), "0", &[]);
    assert_eq!(counters["total_pulses"], 0);
    let events = dir.path().join("events.homx");
    assert_eq!(fs::metadata(&events).unwrap().len(), 32);
    let out = ok(homx()
        .arg("--format")
        .arg("json")
        .arg("analyze")
        .arg(&events)
        .args(["--max-resolvable", "8"]));
    assert_eq!(json(&out.stdout)["total_pulses"], 0);
}

#[test]
fn analyze_reproduces_simulated_counters() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_path("hom-beam.toml");
    let simulated = simulate_into(dir.path(), &config, "150000", &[]);
    let out = ok(homx()
        .arg("--config")
        .arg(&config)
        .args(["--format", "json", "analyze"])
        .arg(dir.path().join("events.homx")));
    let analyzed = json(&out.stdout);
    assert_eq!(analyzed["matrix"], simulated["matrix"]);
    assert_eq!(analyzed["total_pulses"], simulated["total_pulses"]);
}

#[test]
fn truncated_event_file_reports_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &config_path("hom-beam.toml"), "1000", &[]);
    let events = dir.path().join("events.homx");
    let bytes = fs::read(&events).unwrap();
    let cut = 32 + 16 * 500 + 7;
    fs::write(&events, &bytes[..cut]).unwrap();
    let out = run(homx().arg("analyze").arg(&events).args(["--max-resolvable", "8"]));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("offset {cut}")), "{err}");
}

#[test]
fn foreign_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.homx");
    fs::write(&path, b"not an event file at all, just text").unwrap();
    let out = run(homx().arg("analyze").arg(&path));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn amplitude_files_need_a_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let integer_dir = dir.path().join("integer");
    let amplitude_dir = dir.path().join("amplitude");
    let integer = simulate_into(&integer_dir, &config_path("hom-beam.toml"), "100000", &[]);
    let amp_config = write_config(dir.path(), "hom-beam.toml", |t| {
        t.replace("record_type = \"integer\"", "record_type = \"amplitude\"")
    });
    let amplitude = simulate_into(&amplitude_dir, &amp_config, "100000", &[]);
    assert_eq!(integer["matrix"], amplitude["matrix"]);

    let events = amplitude_dir.join("events.homx");
    let out = run(homx().arg("analyze").arg(&events));
    assert_eq!(out.status.code(), Some(1));

    let cal = dir.path().join("calibration.json");
    Calibration::midpoints(1.0, 8).save(&cal).unwrap();
    let out = ok(homx()
        .args(["--format", "json", "analyze"])
        .arg(&events)
        .arg("--calibration")
        .arg(&cal));
    assert_eq!(json(&out.stdout)["matrix"], integer["matrix"]);
}

#[test]
fn scan_writes_artifacts_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    ok(homx()
        .arg("--config")
        .arg(config_path("quick-scan.toml"))
        .arg("--out")
        .arg(dir.path())
        .arg("scan"));
    for name in ["scan.csv", "scan.json", "scan_normalized.csv", "fit.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert!(csv.starts_with("dx_um,rate_11_hz,rate_20_02_hz,dwell_s,repeats\n"));
    assert_eq!(csv.lines().count(), 22);

    let fit = json(&fs::read(dir.path().join("fit.json")).unwrap());
    let depth = fit["dip"]["depth"].as_f64().unwrap();
    let gain = fit["peak"]["depth"].as_f64().unwrap();
    let half_width = fit["dip"]["half_width_um"].as_f64().unwrap();
    // n = 2/50 per mode: dip = μ·n·f/4 = 2.6e5 Hz over a 140 µm footprint.
    assert!((depth / 2.6e5 - 1.0).abs() < 0.1, "{depth}");
    assert!((gain / depth - 1.0).abs() < 0.02, "{gain} vs {depth}");
    assert!((half_width / 140.2 - 1.0).abs() < 0.05, "{half_width}");
    // The wing-normalized split channel dips visibly.
    assert!(fit["normalized_dip_minimum"].as_f64().unwrap() < 0.99);
}

#[test]
fn single_point_scan_skips_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "quick-scan.toml", |t| {
        let start = t.find("start =").unwrap();
        let dwell = t.find("dwell =").unwrap();
        format!("{}points = [\"0 um\"]\n{}", &t[..start], &t[dwell..])
    });
    let out = ok(homx()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .args(["--format", "json", "scan"]));
    let report = json(&out.stdout);
    assert_eq!(report["points"], 1);
    assert!(report["dip"].is_null());
    assert!(dir.path().join("scan.csv").exists());
}

#[test]
fn bench_reports_digest_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(homx()
        .arg("--out")
        .arg(dir.path())
        .args(["--format", "json", "bench", "--records", "2000000", "--pulses", "50000"]));
    let report = json(&out.stdout);
    assert_eq!(report["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(report["seed"], 20240611);
    assert!(report["classify"][0]["pulses_per_second"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("bench.json").exists());
}
