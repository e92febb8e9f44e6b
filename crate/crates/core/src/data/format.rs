//! Portable on-disk sample format.
//!
//! Dataset root holds `manifest.json`; each sample lives in its own directory
//! with `meta.json`, `image.f32` (little-endian 32-bit floats, row-major, HU)
//! and `mask_<k>.u8` (one byte per pixel, values 0/1, row-major).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::mask::{AnnotationSet, BinaryMask, Malignancy};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: String,
    pub malignancy: Malignancy,
    pub n_annotations: usize,
}

/// Dataset index: sample list plus the shared patch size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub patch_size: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != FORMAT_VERSION {
            return Err(DataError::InvalidManifest(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return Err(DataError::InvalidManifest(format!(
                "patch_size {} not divisible by 32",
                self.patch_size
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(&s.sample_id) {
                return Err(DataError::InvalidManifest(format!(
                    "duplicate sample_id {}",
                    s.sample_id
                )));
            }
            if s.n_annotations == 0 || s.n_annotations > 4 {
                return Err(DataError::InvalidManifest(format!(
                    "sample {} has {} annotations, expected 1..=4",
                    s.sample_id, s.n_annotations
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleMeta {
    height: usize,
    width: usize,
    n_annotations: usize,
    malignancy: Malignancy,
    hu_offset: f32,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one sample directory; returns the manifest entry for it.
pub fn write_sample(dir: &Path, set: &AnnotationSet) -> Result<ManifestEntry, DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = SampleMeta {
        height: set.height(),
        width: set.width(),
        n_annotations: set.n_annotations(),
        malignancy: set.malignancy,
        hu_offset: 0.0,
    };
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    fs::write(&meta_path, meta_json).map_err(|e| io_err(&meta_path, e))?;

    let img_path = dir.join("image.f32");
    let mut buf = Vec::with_capacity(set.image.len() * 4);
    for &v in set.image.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&img_path, &buf).map_err(|e| io_err(&img_path, e))?;

    for (k, mask) in set.masks.iter().enumerate() {
        let mask_path = dir.join(format!("mask_{k}.u8"));
        let bytes: Vec<u8> = mask.data().iter().copied().collect();
        fs::write(&mask_path, &bytes).map_err(|e| io_err(&mask_path, e))?;
    }

    Ok(ManifestEntry {
        sample_id: set.sample_id.clone(),
        path: dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default(),
        malignancy: set.malignancy,
        n_annotations: set.n_annotations(),
    })
}

/// Reads one sample directory back into an annotation set.
pub fn read_sample(dir: &Path, sample_id: &str) -> Result<AnnotationSet, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&meta_raw).map_err(|e| DataError::CorruptFile {
        path: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let img_path = dir.join("image.f32");
    let bytes = fs::read(&img_path).map_err(|e| io_err(&img_path, e))?;
    let expected = meta.height * meta.width * 4;
    if bytes.len() != expected {
        return Err(DataError::CorruptFile {
            path: img_path.display().to_string(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut values = Vec::with_capacity(meta.height * meta.width);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) + meta.hu_offset);
    }
    let image = Array2::from_shape_vec((meta.height, meta.width), values)
        .expect("length checked above");

    let mut masks = Vec::with_capacity(meta.n_annotations);
    for k in 0..meta.n_annotations {
        let mask_path = dir.join(format!("mask_{k}.u8"));
        let bytes = fs::read(&mask_path).map_err(|e| io_err(&mask_path, e))?;
        if bytes.len() != meta.height * meta.width {
            return Err(DataError::CorruptFile {
                path: mask_path.display().to_string(),
                reason: format!(
                    "expected {} bytes, found {}",
                    meta.height * meta.width,
                    bytes.len()
                ),
            });
        }
        if let Some(offset) = bytes.iter().position(|&b| b > 1) {
            return Err(DataError::BadMaskValue {
                path: mask_path.display().to_string(),
                offset,
                value: bytes[offset],
            });
        }
        let data = Array2::from_shape_vec((meta.height, meta.width), bytes)
            .expect("length checked above");
        masks.push(BinaryMask::new(data).expect("values checked above"));
    }

    AnnotationSet::new(sample_id.to_string(), image, masks, meta.malignancy)
        .map_err(|e| DataError::CorruptFile {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })
}

/// Writes a whole dataset (samples + manifest) under `root`.
pub fn write_dataset(
    root: &Path,
    samples: &[AnnotationSet],
    patch_size: usize,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for set in samples {
        if set.height() != patch_size || set.width() != patch_size {
            return Err(DataError::DimensionMismatch {
                sample_id: set.sample_id.clone(),
                expected: (patch_size, patch_size),
                got: (set.height(), set.width()),
            });
        }
        let dir = root.join(&set.sample_id);
        entries.push(write_sample(&dir, set)?);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        patch_size,
        samples: entries,
    };
    manifest.validate()?;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, DataError> {
    let path = root.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| DataError::CorruptFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Open dataset handle: manifest plus root path.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let manifest = read_manifest(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Loads a sample and checks its dimensions against the manifest.
    pub fn load(&self, entry: &ManifestEntry) -> Result<AnnotationSet, DataError> {
        let set = read_sample(&self.root.join(&entry.path), &entry.sample_id)?;
        let want = (self.manifest.patch_size, self.manifest.patch_size);
        if (set.height(), set.width()) != want {
            return Err(DataError::DimensionMismatch {
                sample_id: entry.sample_id.clone(),
                expected: want,
                got: (set.height(), set.width()),
            });
        }
        Ok(set)
    }

    pub fn load_by_id(&self, sample_id: &str) -> Result<AnnotationSet, DataError> {
        let entry = self
            .manifest
            .samples
            .iter()
            .find(|e| e.sample_id == sample_id)
            .ok_or_else(|| {
                DataError::InvalidManifest(format!("sample {sample_id} not in manifest"))
            })?;
        self.load(entry)
    }
}

/// Raw `.f32` map writer shared by the prediction outputs.
pub fn write_f32_map(path: &Path, map: &Array2<f32>) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(map.len() * 4);
    for &v in map.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Raw `.f32` map reader (shape must be known by the caller).
pub fn read_f32_map(path: &Path, height: usize, width: usize) -> Result<Array2<f32>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() != height * width * 4 {
        return Err(DataError::CorruptFile {
            path: path.display().to_string(),
            reason: format!("expected {} bytes, found {}", height * width * 4, bytes.len()),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((height, width), values).expect("length checked"))
}
