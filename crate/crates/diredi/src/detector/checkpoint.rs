//! Detector checkpoints on the shared archive container: a JSON manifest
//! (config, categories, seed, provenance, parameter names and shapes) plus
//! f32 tensor blobs in manifest order.

use super::{build_detector, Detector, DetectorConfig};
use crate::container::{pack_tensor, read_archive, unpack_tensor, write_archive};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_KIND: &str = "detector-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub format_version: u32,
    pub config: DetectorConfig,
    pub categories: Vec<String>,
    pub seed: u64,
    /// Free-form training provenance (stage name, epochs, data fingerprint).
    pub provenance: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// Digest of the parameter store at save time; verified after load.
    pub param_digest: String,
}

pub fn save_checkpoint(
    detector: &Detector,
    path: &Path,
    provenance: serde_json::Value,
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    for (name, p) in detector.store.iter() {
        let data = p.tensor.value();
        params.push(ParamEntry {
            name: name.clone(),
            shape: data.shape().to_vec(),
            dtype: "f32".into(),
        });
        pack_tensor(&mut payload, &data);
    }
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        format_version: FORMAT_VERSION,
        config: detector.config.clone(),
        categories: detector.categories.clone(),
        seed: detector.seed,
        provenance,
        params,
        param_digest: detector.store.digest(),
    };
    write_archive(path, &serde_json::to_vec_pretty(&meta)?, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, CheckpointMeta)> {
    let (manifest, payload) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&manifest)?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!(
            "{}: kind `{}` is not a detector checkpoint",
            path.display(),
            meta.kind
        )));
    }
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {}",
            path.display(),
            meta.format_version
        )));
    }
    let detector = build_detector(&meta.config, &meta.categories, meta.seed)?;
    if meta.params.len() != detector.store.len() {
        return Err(Error::Shape(format!(
            "{}: checkpoint has {} parameters, model has {}",
            path.display(),
            meta.params.len(),
            detector.store.len()
        )));
    }
    let mut offset = 0usize;
    for entry in &meta.params {
        let value = unpack_tensor(&payload, &mut offset, &entry.shape)?;
        detector.store.set_value(&entry.name, value)?;
    }
    if offset != payload.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            payload.len() - offset
        )));
    }
    let digest = detector.store.digest();
    if digest != meta.param_digest {
        return Err(Error::DigestMismatch {
            expected: meta.param_digest.clone(),
            found: digest,
        });
    }
    Ok((detector, meta))
}
