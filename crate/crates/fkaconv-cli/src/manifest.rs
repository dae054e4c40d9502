//! Run manifests and atomic file writes.
//!
//! Every command writes exactly one manifest JSON next to its outputs,
//! carrying enough to reproduce the run (command, argument echo, seed,
//! build id, timestamps, output paths). All file writes go through
//! write-temp-then-rename.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fkaconv::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub seed: u64,
    pub build: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

pub fn build_id() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        env!("FKAC_GIT_HASH")
    )
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Whole-file atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Manifest path for a single-file output: `<out>.manifest.json`; for a
/// directory: `<dir>/manifest.json`.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| fkaconv::Error::Parameter(format!("manifest serialization: {e}")))?;
    write_atomic(path, body.as_bytes())
}
