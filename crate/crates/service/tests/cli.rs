use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use serde_json::Value;

use crowdlab::cli::{execute, Cli};

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

/// Runs a command in-process: (exit code, stdout, stderr).
fn crowdlab(store: &Path, args: &[&str]) -> (u8, String, String) {
    let store = store.to_str().unwrap();
    let mut argv = vec!["crowdlab", "--store", store];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv).unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = execute(cli, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn validate_reports_a_cycle() {
    let out = Command::new(env!("CARGO_BIN_EXE_crowdlab"))
        .args(["validate", sample("cyclic.workflow.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "cycle: A,B");
    let err = json(String::from_utf8_lossy(&out.stderr).lines().last().unwrap());
    assert_eq!(err["error"]["code"], "cycle");
}

#[test]
fn validate_accepts_the_samples() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.log");
    let units = sample("study-units.ndjson");
    for wf in ["between-subjects.workflow.json", "highlighting-study.workflow.json", "windowed-study.workflow.json"] {
        let (code, out, _) = crowdlab(&store, &["validate", sample(wf).to_str().unwrap(), "--units", units.to_str().unwrap()]);
        assert_eq!((code, out.trim()), (0, "ok"), "{wf}");
    }
    let crash_units = sample("crash-units.json");
    let (code, _, _) = crowdlab(
        &store,
        &["validate", sample("crash.workflow.json").to_str().unwrap(), "--units", crash_units.to_str().unwrap()],
    );
    assert_eq!(code, 0);
}

#[test]
fn same_seed_gives_identical_report_digests() {
    let digests: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let store = dir.path().join("s.log");
            let wf = sample("between-subjects.workflow.json");
            let (code, out, err) = crowdlab(&store, &["run", wf.to_str().unwrap(), "--adapter", "sim", "--seed", "7"]);
            assert_eq!(code, 0, "{err}");
            let summary = json(&out);
            let (code, report, _) = crowdlab(&store, &["report", "sim-7"]);
            assert_eq!(code, 0);
            assert_eq!(
                crowdlab::ops::report_digest(&serde_json::from_str(&report).unwrap()),
                summary["reportDigest"].as_str().unwrap()
            );
            summary["reportDigest"].as_str().unwrap().to_string()
        })
        .collect();
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn uncontrolled_study_shows_returning_workers() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.log");
    let wf = sample("highlighting-study.workflow.json");
    let profile = sample("calibrated.profile.json");
    let units = sample("study-units.ndjson");
    let mut fractions = Vec::new();
    for seed in ["1", "2", "3"] {
        let (code, out, err) = crowdlab(
            &store,
            &[
                "simulate",
                wf.to_str().unwrap(),
                "--units",
                units.to_str().unwrap(),
                "--profile",
                profile.to_str().unwrap(),
                "--seed",
                seed,
                "--no-eligibility",
                "--no-quotas",
                "--no-schedule",
            ],
        );
        assert_eq!(code, 0, "{err}");
        fractions.push(json(&out)["returningWorkerFraction"].as_f64().unwrap());
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 0.38).abs() <= 0.05, "{fractions:?}");
    let (code, text, _) = crowdlab(&store, &["report", "sim-1", "--format", "text"]);
    assert_eq!(code, 0);
    assert!(text.contains("returning workers"));
}

#[test]
fn unknown_run_exits_nonzero_with_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = crowdlab(&dir.path().join("s.log"), &["report", "nope"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert_eq!(json(err.trim())["error"]["code"], "not-found");
}

#[test]
fn export_and_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.log");
    let b = dir.path().join("b.log");
    let archive = dir.path().join("run.json");
    let wf = sample("between-subjects.workflow.json");
    assert_eq!(crowdlab(&a, &["run", wf.to_str().unwrap(), "--seed", "3"]).0, 0);
    assert_eq!(crowdlab(&a, &["export", "sim-3", archive.to_str().unwrap()]).0, 0);
    let (code, out, _) = crowdlab(&b, &["import", archive.to_str().unwrap()]);
    assert_eq!((code, out.trim()), (0, "sim-3"));
    assert_eq!(crowdlab(&a, &["report", "sim-3"]).1, crowdlab(&b, &["report", "sim-3"]).1);
    // Importing twice is refused.
    assert_eq!(crowdlab(&b, &["import", archive.to_str().unwrap()]).0, 1);
}

#[test]
fn file_adapter_run_can_be_advanced() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.log");
    let tasks = dir.path().join("tasks");
    let wf = sample("between-subjects.workflow.json");
    let (code, out, err) = crowdlab(
        &store,
        &["run", wf.to_str().unwrap(), "--adapter", "file", "--run-id", "live", "--tasks-dir", tasks.to_str().unwrap()],
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(json(&out)["status"], "running");
    assert_eq!(std::fs::read_dir(&tasks).unwrap().count(), 3);
    let (code, out, _) = crowdlab(&store, &["status", "live"]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["blocks"].as_array().unwrap().len(), 5);
    assert_eq!(crowdlab(&store, &["advance", "live"]).0, 0);
}
