//! Checkpoint persistence: one binary parameter blob plus a JSON sidecar
//! describing how to rebuild and re-pair the model.
//!
//! Blob layout: 8-byte magic, u64 little-endian parameter count, then the
//! parameters as little-endian f64 — bitwise exact round-trips. The sidecar
//! (same path with `.json` appended) records the architecture, schedule
//! recipe, channel weights, a hash of the training configuration, the
//! training seed, and a SHA-256 of the blob so mismatched pairs are caught
//! at load time.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ChannelWeights;
use crate::schedule::ScheduleSpec;

const MAGIC: &[u8; 8] = b"MCDMPRM1";

/// Role tag for masked-triplet denoiser checkpoints.
pub const DENOISER_KIND: &str = "denoiser";
/// Role tag for the noisy-input guidance classifier.
pub const GUIDANCE_CLASSIFIER_KIND: &str = "guidance-classifier";
/// Role tag for the clean-image downstream classifier (also the
/// feature extractor behind distribution-distance scoring).
pub const DOWNSTREAM_CLASSIFIER_KIND: &str = "downstream-classifier";
/// Role tag for the lesion segmentation network.
pub const SEGMENTER_KIND: &str = "segmenter";

/// Sidecar metadata; `A` is the architecture config type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointInfo<A> {
    /// Role tag, e.g. "denoiser" or "guidance-classifier"; guards against
    /// loading the wrong network kind.
    pub kind: String,
    pub arch: A,
    pub schedule: ScheduleSpec,
    pub channel_weights: ChannelWeights,
    pub train_config_hash: String,
    pub seed: u64,
    pub param_count: usize,
    pub param_sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

fn decode_params(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    let err = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(err("not a parameter blob (bad magic)".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * count {
        return Err(err(format!(
            "length {} does not match declared parameter count {count}",
            bytes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for chunk in bytes[16..].chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(params)
}

/// Writes blob + sidecar. `info.param_count` / `param_sha256` are filled in
/// here from the actual buffer.
pub fn save_checkpoint<A: Serialize>(
    path: &Path,
    mut info: CheckpointInfo<A>,
    params: &[f64],
) -> Result<()> {
    let blob = encode_params(params);
    info.param_count = params.len();
    info.param_sha256 = sha256_hex(&blob);
    let mut f = fs::File::create(path)?;
    f.write_all(&blob)?;
    f.sync_all()?;
    let json = serde_json::to_string_pretty(&info)?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Loads and cross-validates a blob/sidecar pair, checking the role tag.
pub fn load_checkpoint<A: DeserializeOwned>(
    path: &Path,
    expected_kind: &str,
) -> Result<(CheckpointInfo<A>, Vec<f64>)> {
    let mut blob = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut blob)?;
    let sc = sidecar_path(path);
    let json = fs::read_to_string(&sc)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", sc.display())))?;
    let info: CheckpointInfo<A> = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("{}: invalid sidecar: {e}", sc.display())))?;

    if info.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{}: kind \"{}\" but expected \"{expected_kind}\"",
            path.display(),
            info.kind
        )));
    }
    let got_sha = sha256_hex(&blob);
    if got_sha != info.param_sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: parameter hash mismatch (sidecar {}, blob {got_sha})",
            path.display(),
            info.param_sha256
        )));
    }
    let params = decode_params(&blob, path)?;
    if params.len() != info.param_count {
        return Err(Error::Checkpoint(format!(
            "{}: sidecar declares {} parameters, blob holds {}",
            path.display(),
            info.param_count,
            params.len()
        )));
    }
    Ok((info, params))
}
