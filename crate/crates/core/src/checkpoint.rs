//! Single-file model checkpoint: a magic header, a JSON metadata block with
//! the format version and architecture hyperparameters, then the named
//! parameter arrays as little-endian f32. Arrays are written in sorted name
//! order so identical models produce identical bytes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Ax;
use crate::error::CheckpointError;
use crate::model::{ModelBundle, ModelConfig};

const MAGIC: &[u8; 4] = b"UASN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata block embedded in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub has_adversarial: bool,
    /// Free-form training-state fields (resume epoch, optimizer step, ...).
    #[serde(default)]
    pub extra: std::collections::BTreeMap<String, String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes metadata plus named arrays. `extra_arrays` lands after the model
/// parameters (names must not collide with parameter names).
pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &[(String, &Ax)],
    extra_arrays: &[(String, Ax)],
) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| corrupt(path, format!("meta encode: {e}")))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&meta_json).map_err(|e| io_err(path, e))?;

    let total = params.len() + extra_arrays.len();
    w.write_all(&(total as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    let borrowed_extra: Vec<(String, &Ax)> = extra_arrays
        .iter()
        .map(|(n, a)| (n.clone(), a))
        .collect();
    for (name, arr) in params.iter().chain(borrowed_extra.iter()) {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        w.write_all(name_bytes).map_err(|e| io_err(path, e))?;
        let dims = arr.shape();
        w.write_all(&(dims.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads metadata and every named array.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Ax)>), CheckpointError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)
        .map_err(|_| corrupt(path, "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| corrupt(path, format!("meta decode: {e}")))?;

    let count = read_u32(&mut r, path)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| corrupt(path, "truncated tensor name"))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| corrupt(path, "tensor name not utf-8"))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| corrupt(path, "truncated dims"))?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0u8; n * 4];
        r.read_exact(&mut data)
            .map_err(|_| corrupt(path, format!("truncated data for {name}")))?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| corrupt(path, format!("bad shape for {name}: {e}")))?;
        arrays.push((name, arr));
    }
    // trailing garbage check
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(corrupt(path, "trailing bytes after last tensor")),
        Err(e) => return Err(io_err(path, e)),
    }
    Ok((meta, arrays))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| corrupt(path, "truncated u32 field"))?;
    Ok(u32::from_le_bytes(b))
}

/// Saves a model bundle (optionally with extra training-state arrays).
pub fn save_bundle(
    path: &Path,
    bundle: &ModelBundle,
    extra: std::collections::BTreeMap<String, String>,
    extra_arrays: &[(String, Ax)],
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model: bundle.config.clone(),
        has_adversarial: bundle.adversarial.is_some(),
        extra,
    };
    let params: Vec<(String, &Ax)> = bundle
        .store
        .iter_sorted()
        .map(|(n, a)| (n.to_string(), a))
        .collect();
    write_checkpoint(path, &meta, &params, extra_arrays)
}

/// Rebuilds a bundle from a checkpoint. Returns the bundle, the metadata and
/// any non-parameter arrays (training state) for the caller.
pub fn load_bundle(
    path: &Path,
) -> Result<(ModelBundle, CheckpointMeta, Vec<(String, Ax)>), CheckpointError> {
    let (meta, arrays) = read_checkpoint(path)?;
    let mut bundle = ModelBundle::new(meta.model.clone(), 0, meta.has_adversarial)
        .map_err(|e| corrupt(path, format!("config rebuild: {e}")))?;
    let mut covered = 0usize;
    let mut leftovers = Vec::new();
    for (name, arr) in arrays {
        match bundle.store.slot_by_name(&name) {
            Some(slot) => {
                if bundle.store.value(slot).shape() != arr.shape() {
                    return Err(corrupt(
                        path,
                        format!(
                            "shape mismatch for {name}: file {:?}, model {:?}",
                            arr.shape(),
                            bundle.store.value(slot).shape()
                        ),
                    ));
                }
                *bundle.store.value_mut(slot) = arr;
                covered += 1;
            }
            None => leftovers.push((name, arr)),
        }
    }
    if covered != bundle.store.len() {
        return Err(corrupt(
            path,
            format!(
                "checkpoint covers {covered} of {} model parameters",
                bundle.store.len()
            ),
        ));
    }
    Ok((bundle, meta, leftovers))
}
