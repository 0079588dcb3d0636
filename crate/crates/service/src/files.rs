//! Reading and writing the on-disk formats: workflow files, unit files,
//! population profiles and run archives.

use std::fs;
use std::path::Path;

use crowdlab_core::platform::sim::PopulationProfile;
use crowdlab_core::store::RunArchive;
use crowdlab_core::{DataUnit, WorkflowDef};

use crate::error::ApiError;

fn read(path: &Path) -> Result<String, ApiError> {
    fs::read_to_string(path).map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())).with_code("io"))
}

pub fn load_workflow(path: &Path) -> Result<WorkflowDef, ApiError> {
    WorkflowDef::from_json(&read(path)?)
        .map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())).with_code("invalid-file"))
}

/// A JSON array of units, or one unit per line when the file ends in
/// `.ndjson` or `.jsonl`.
pub fn load_units(path: &Path) -> Result<Vec<DataUnit>, ApiError> {
    let text = read(path)?;
    let lines = matches!(path.extension().and_then(|e| e.to_str()), Some("ndjson" | "jsonl"));
    let parsed: Result<Vec<DataUnit>, serde_json::Error> = if lines {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    } else {
        serde_json::from_str(&text)
    };
    parsed.map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())).with_code("invalid-file"))
}

pub fn load_profile(path: &Path) -> Result<PopulationProfile, ApiError> {
    PopulationProfile::from_json(&read(path)?)
        .map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())).with_code("invalid-profile"))
}

pub fn write_archive(path: &Path, archive: &RunArchive) -> Result<(), ApiError> {
    let text = serde_json::to_string(archive).map_err(|e| ApiError::internal(e.to_string()))?;
    fs::write(path, text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
}

pub fn load_archive(path: &Path) -> Result<RunArchive, ApiError> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())).with_code("invalid-file"))
}
