use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use optocal::dataset::{RunKind, TwpaPump};
use optocal::pipeline::CalibrationReport;
use optocal::synth::{synthesize, ScenarioConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_optocal"))
}

fn replica_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/paper_replica.scenario")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn generate(dir: &Path, seed: &str, extra: &[&str]) -> Output {
    let sc = replica_scenario();
    let mut args = vec!["generate", s(&sc), "--out", s(dir), "--seed", seed];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn generate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (d, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        let o = generate(d, seed, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (sa, sb, sc) = (snapshot(&a), snapshot(&b), snapshot(&c));
    assert!(sa.len() > 100);
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
}

#[test]
fn zero_noise_scale_is_seed_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(generate(&a, "1", &["--noise-scale", "0"]).status.success());
    assert!(generate(&b, "2", &["--noise-scale", "0"]).status.success());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    for (k, v) in &sa {
        if k.extension().is_some_and(|e| e == "csv") {
            assert_eq!(Some(v), sb.get(k), "{}", k.display());
        }
    }
}

#[test]
fn unwritable_output_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = generate(&blocker.join("sub"), "1", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let o = run(&["calibrate", s(&tmp.path().join("missing.toml")), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["calibrate"]).status.code(), Some(2));
}

#[test]
fn calibrate_writes_artifacts_and_leaves_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("out");
    assert!(generate(&ds, "5", &[]).status.success());
    let before = snapshot(&ds);
    let o = run(&["calibrate", s(&ds), "--out", s(&out), "--mc-samples", "200", "--threads", "2"]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(before, snapshot(&ds));
    assert!(stdout.contains("branch: Undercoupled"), "{stdout}");
    assert!(!stdout.contains('{'));
    for f in ["report.json", "kappa_vs_power.csv", "delta_vs_power.csv", "aph_over_nph_vs_T.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rep = CalibrationReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mean = rep.summary.as_ref().unwrap().ratio_mean;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");

    // Re-rendering reproduces the stored tables and summary.
    let again = tmp.path().join("again");
    let o = run(&["report", s(&out.join("report.json")), "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), stdout);
    assert_eq!(snapshot(&out), snapshot(&again));
}

#[test]
fn uncorrected_ratio_tracks_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("out");
    assert!(generate(&ds, "5", &[]).status.success());
    let o = run(&["calibrate", s(&ds), "--out", s(&out), "--mc-samples", "0", "--no-twpa-correction"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = CalibrationReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(!rep.provenance.twpa_correction);
    let low: Vec<_> = rep.ratio_vs_t.iter().filter(|r| r.t_k <= 0.05).collect();
    assert!(!low.is_empty());
    for r in low {
        assert!(r.mean < 0.8, "{} mK: {}", r.t_k * 1e3, r.mean);
    }
}

#[test]
fn missing_off_scans_exit_1_with_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("out");
    let mut syn = synthesize(&ScenarioConfig::paper_replica()).unwrap();
    syn.manifest
        .runs
        .retain(|r| !(r.kind == RunKind::TwpaScan && r.twpa_pump == TwpaPump::Off));
    syn.write(&ds).unwrap();
    let o = run(&["calibrate", s(&ds), "--out", s(&out), "--mc-samples", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("twpa_scan"));
    let rep = CalibrationReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(rep.failure.is_some());
    assert!(!rep.cavity_tls.is_empty());
}

#[test]
fn fit_stops_before_peaks() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("out");
    assert!(generate(&ds, "5", &[]).status.success());
    let o = run(&["fit", s(&ds.join("manifest.toml")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("TWPA: lambda0"), "{stdout}");
    let rep = CalibrationReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(rep.peaks.is_empty() && rep.twpa_tls.is_some());
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("checks passed"));
    assert!(!stdout.contains("FAIL"));
}
