//! Run manifests and atomic output directories.
//!
//! Every artifact-producing command assembles its outputs in a temporary
//! sibling directory, writes a `run-manifest.json` recording the command
//! line, resolved configuration, seed, and content hashes of all inputs
//! and outputs, then renames the directory into place. Interrupted or
//! failed runs leave nothing at the target path.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use macdm::{Error, Result};

use crate::config::RunConfig;

/// Manifest file name inside every output directory.
pub const RUN_MANIFEST_NAME: &str = "run-manifest.json";

/// A file involved in a run: where it was and what it contained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-execute a run: the command, the resolved
/// configuration, the root seed, and content hashes of inputs and outputs.
/// Wall-clock fields are informational and excluded from reproducibility
/// comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    /// Input files by role name ("train-data", "denoiser", ...).
    pub inputs: BTreeMap<String, FileRecord>,
    /// Produced artifacts by role name; paths relative to the output root.
    pub outputs: BTreeMap<String, FileRecord>,
    pub started_unix_ms: u64,
    pub wall_clock_seconds: f64,
}

/// Accumulates a [`RunManifest`] while a command executes.
pub struct Runner {
    manifest: RunManifest,
    t0: Instant,
}

impl Runner {
    pub fn new(command: &str, config: RunConfig) -> Self {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Runner {
            manifest: RunManifest {
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: std::env::args().collect(),
                seed: config.seed,
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms,
                wall_clock_seconds: 0.0,
            },
            t0: Instant::now(),
        }
    }

    pub fn record_input(&mut self, role: &str, path: &Path, sha256: String) {
        self.manifest.inputs.insert(
            role.to_string(),
            FileRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
    }

    /// Records a produced artifact; `rel` is its path relative to the
    /// output root (where the directory will land after the rename).
    pub fn record_output(&mut self, role: &str, rel: &str, sha256: String) {
        self.manifest.outputs.insert(
            role.to_string(),
            FileRecord {
                path: rel.to_string(),
                sha256,
            },
        );
    }

    /// Stamps the wall clock and writes `run-manifest.json` under `dir`.
    fn write_into(mut self, dir: &Path) -> Result<()> {
        self.manifest.wall_clock_seconds = self.t0.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(RUN_MANIFEST_NAME), json)?;
        Ok(())
    }
}

/// SHA-256 of a file's bytes, streamed.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Content fingerprint of a dataset directory: the hash of its
/// `manifest.json`, which itself lists per-file hashes of every image.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    sha256_file(&dir.join("manifest.json"))
}

/// Runs `build` against a temporary sibling of `out`, writes the returned
/// manifest into it, and renames it to `out` on success. `out` must not
/// already exist; on any failure the temporary directory is removed.
pub fn with_atomic_dir<F>(out: &Path, build: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<Runner>,
{
    if out.exists() {
        return Err(Error::Config(format!(
            "output path {} already exists; choose a fresh directory",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no name", out.display())))?;
    let tmp = out.with_file_name(format!(
        ".{}.tmp.{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let result = build(&tmp).and_then(|runner| runner.write_into(&tmp));
    match result {
        Ok(()) => {
            fs::rename(&tmp, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}
