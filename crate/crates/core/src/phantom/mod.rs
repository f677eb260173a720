//! Procedural phantom corpus and its on-disk dataset format.
//!
//! Directory layout: `manifest.json` plus `images/<id>.png`,
//! `bone/<id>.png`, `lesion/<id>.png` (8-bit grayscale). The manifest
//! records per-file SHA-256 checksums, labels, provenance, and optional
//! fold assignments; the loader accepts any dataset in this format, so a
//! real corpus can replace phantoms without code changes.

pub mod generator;

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::{derive_seed, rng_from};

pub use generator::{generate_corpus, generate_phantom, MIN_SIZE};

/// Binary class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Cml,
}

impl Label {
    /// Class index used by the classifiers (normal=0, CML=1).
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Cml => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => write!(f, "normal"),
            Label::Cml => write!(f, "cml"),
        }
    }
}

/// Where a record came from: a real radiograph, a translation-generated
/// sample, or the procedural generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
    Phantom,
}

/// One dataset record: grayscale image in [0,1] plus binary bone and
/// lesion masks, with label and provenance.
#[derive(Debug, Clone)]
pub struct LabeledTriplet {
    pub image: ImageTensor,
    pub bone_mask: Array2<f64>,
    pub lesion_mask: Array2<f64>,
    pub label: Label,
    pub id: String,
    pub provenance: Provenance,
}

impl LabeledTriplet {
    /// Validates shape agreement, binary masks, and the hard invariant
    /// that normal records carry an empty lesion mask.
    pub fn new(
        image: ImageTensor,
        bone_mask: Array2<f64>,
        lesion_mask: Array2<f64>,
        label: Label,
        id: String,
        provenance: Provenance,
    ) -> Result<Self> {
        let dim = image.data().dim();
        if bone_mask.dim() != dim || lesion_mask.dim() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim:?}"),
                got: format!("bone {:?}, lesion {:?}", bone_mask.dim(), lesion_mask.dim()),
            });
        }
        for (name, m) in [("bone", &bone_mask), ("lesion", &lesion_mask)] {
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Dataset(format!(
                    "record {id}: {name} mask is not binary"
                )));
            }
        }
        if label == Label::Normal && lesion_mask.sum() != 0.0 {
            return Err(Error::Dataset(format!(
                "record {id}: normal label with non-empty lesion mask"
            )));
        }
        Ok(LabeledTriplet {
            image,
            bone_mask,
            lesion_mask,
            label,
            id,
            provenance,
        })
    }

    pub fn height_width(&self) -> (usize, usize) {
        self.image.data().dim()
    }

    /// Clean diffusion state: image mapped [0,1] -> [-1,1] and masks
    /// mapped {0,1} -> {-1,+1}, stacked as (3, H, W).
    pub fn to_symmetric_state(&self) -> ndarray::Array3<f64> {
        let (h, w) = self.height_width();
        let mut out = ndarray::Array3::<f64>::zeros((3, h, w));
        out.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&self.image.data().mapv(|v| 2.0 * v - 1.0));
        out.index_axis_mut(ndarray::Axis(0), 1)
            .assign(&self.bone_mask.mapv(|v| 2.0 * v - 1.0));
        out.index_axis_mut(ndarray::Axis(0), 2)
            .assign(&self.lesion_mask.mapv(|v| 2.0 * v - 1.0));
        out
    }
}

/// Manifest record entry; paths are relative to the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub label: Label,
    pub provenance: Provenance,
    /// Cross-validation fold, when assigned.
    pub fold: Option<usize>,
    pub image_path: String,
    pub bone_path: String,
    pub lesion_path: String,
    pub image_sha256: String,
    pub bone_sha256: String,
    pub lesion_sha256: String,
}

/// Dataset metadata plus the record listing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Edge length of every (square) image in the set.
    pub resolution: usize,
    /// Stored pixel convention, always "unit" ([0,1] mapped to 8-bit).
    pub value_range: String,
    pub generator_version: String,
    pub seed: u64,
    pub records: Vec<RecordEntry>,
}

/// Manifest schema version written by this crate.
pub const MANIFEST_VERSION: u32 = 1;
/// Generator version tag recorded in manifests.
pub const GENERATOR_VERSION: &str = "phantom-1";

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_gray_png(data: &Array2<f64>, binary: bool) -> Result<Vec<u8>> {
    let (h, w) = data.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = data[[y, x]];
            let byte = if binary {
                if v > 0.5 {
                    255
                } else {
                    0
                }
            } else {
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Luma([byte]));
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn decode_gray_png(bytes: &[u8], binary: bool, what: &str) -> Result<Array2<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Dataset(format!("{what}: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f64>::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let byte = img.get_pixel(x, y).0[0];
            out[[y as usize, x as usize]] = if binary {
                if byte > 127 {
                    1.0
                } else {
                    0.0
                }
            } else {
                byte as f64 / 255.0
            };
        }
    }
    Ok(out)
}

/// Writes PNGs and `manifest.json` under `dir`, returning the manifest.
/// Quantization to 8-bit bounds the reload error by 1/255 per pixel.
pub fn save_dataset(
    dir: &Path,
    records: &[LabeledTriplet],
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    for sub in ["images", "bone", "lesion"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let image_path = format!("images/{}.png", r.id);
        let bone_path = format!("bone/{}.png", r.id);
        let lesion_path = format!("lesion/{}.png", r.id);
        let img_bytes = encode_gray_png(r.image.data(), false)?;
        let bone_bytes = encode_gray_png(&r.bone_mask, true)?;
        let lesion_bytes = encode_gray_png(&r.lesion_mask, true)?;
        fs::write(dir.join(&image_path), &img_bytes)?;
        fs::write(dir.join(&bone_path), &bone_bytes)?;
        fs::write(dir.join(&lesion_path), &lesion_bytes)?;
        entries.push(RecordEntry {
            id: r.id.clone(),
            label: r.label,
            provenance: r.provenance,
            fold: None,
            image_sha256: sha256_hex(&img_bytes),
            bone_sha256: sha256_hex(&bone_bytes),
            lesion_sha256: sha256_hex(&lesion_bytes),
            image_path,
            bone_path,
            lesion_path,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution,
        value_range: "unit".to_string(),
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        records: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads `manifest.json` and every referenced file, verifying checksums.
/// Errors name the offending record id.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledTriplet>)> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Dataset(format!("{}: malformed manifest: {e}", manifest_path.display())))?;

    let mut seen = std::collections::HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
        }
    }

    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let read = |rel: &str, sha: &str, what: &str| -> Result<Vec<u8>> {
            let path = dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| {
                Error::Dataset(format!("record {}: missing {what} file {rel}: {e}", r.id))
            })?;
            if sha256_hex(&bytes) != sha {
                return Err(Error::Dataset(format!(
                    "record {}: checksum mismatch for {what} file {rel}",
                    r.id
                )));
            }
            Ok(bytes)
        };
        let img = decode_gray_png(
            &read(&r.image_path, &r.image_sha256, "image")?,
            false,
            &format!("record {} image", r.id),
        )?;
        let bone = decode_gray_png(
            &read(&r.bone_path, &r.bone_sha256, "bone mask")?,
            true,
            &format!("record {} bone mask", r.id),
        )?;
        let lesion = decode_gray_png(
            &read(&r.lesion_path, &r.lesion_sha256, "lesion mask")?,
            true,
            &format!("record {} lesion mask", r.id),
        )?;
        out.push(LabeledTriplet::new(
            ImageTensor::new(img, ValueRange::UNIT)?,
            bone,
            lesion,
            r.label,
            r.id.clone(),
            r.provenance,
        )?);
    }
    Ok((manifest, out))
}

/// Stratified k-fold assignment: within each class, records are shuffled
/// by a seed-derived stream and dealt round-robin, so per-fold class
/// counts differ by at most one.
pub fn split_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::Config(format!("fold count {k} must be at least 2")));
    }
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in manifest.records.iter().enumerate() {
        by_label.entry(r.label.index()).or_default().push(i);
    }
    for (label_idx, members) in &by_label {
        if members.len() < k {
            return Err(Error::Dataset(format!(
                "class {label_idx} has {} records, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let mut out = manifest.clone();
    for (label_idx, members) in by_label {
        let mut order = members;
        let mut rng = rng_from(derive_seed(seed, &format!("folds-class-{label_idx}")));
        // Fisher-Yates on the per-class index list.
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for (pos, rec_idx) in order.into_iter().enumerate() {
            out.records[rec_idx].fold = Some(pos % k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
