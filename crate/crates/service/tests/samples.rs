use std::path::{Path, PathBuf};

use crowdlab::files;
use crowdlab_core::platform::sim::PopulationProfile;
use crowdlab_core::simulation::workloads;

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

#[test]
fn sample_workflows_match_the_bundled_workloads() {
    let cases = [
        ("between-subjects.workflow.json", workloads::between_subjects_workflow()),
        ("highlighting-study.workflow.json", workloads::condition_study(5)),
        ("windowed-study.workflow.json", workloads::windowed_study(true)),
        ("crash.workflow.json", workloads::crash_workflow()),
    ];
    for (file, expected) in cases {
        assert_eq!(files::load_workflow(&sample(file)).unwrap(), expected, "{file}");
    }
}

#[test]
fn sample_units_and_profiles_parse() {
    assert_eq!(files::load_units(&sample("study-units.ndjson")).unwrap(), workloads::study_units());
    assert_eq!(files::load_units(&sample("crash-units.json")).unwrap(), workloads::crash_units());
    assert_eq!(files::load_profile(&sample("calibrated.profile.json")).unwrap(), PopulationProfile::calibrated());
    assert_eq!(files::load_profile(&sample("two-country.profile.json")).unwrap(), workloads::two_country_profile());
}

#[test]
fn malformed_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"schemaVersion\": 1, \"name\": \"x\", \"blocks\": [], \"policy\": {}, \"extra\": 1}").unwrap();
    assert_eq!(files::load_workflow(&bad).unwrap_err().code, "invalid-file");
    assert_eq!(files::load_workflow(&dir.path().join("missing.json")).unwrap_err().code, "io");
    let units = dir.path().join("u.jsonl");
    std::fs::write(&units, "{\"id\":\"a\",\"payload\":{}}\n\n{\"id\":\"b\",\"payload\":{}}\n").unwrap();
    assert_eq!(files::load_units(&units).unwrap().len(), 2);
}
