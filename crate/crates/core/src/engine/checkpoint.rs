//! Checkpoint file: `MTTU1` magic, little-endian `u64` manifest length, JSON
//! manifest, then little-endian `f32` payload. Parameters come first in
//! manifest order, followed by the optimiser's first and second moments.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtTransUNet};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MTTU1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    step: usize,
    config: ModelConfig,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    adam: AdamConfig,
    first_moment_offset: usize,
    second_moment_offset: usize,
}

/// Everything restored from a checkpoint file.
pub struct Checkpoint {
    pub model: MtTransUNet,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub step: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &MtTransUNet,
    optimizer: Option<&OptimizerState>,
    seed: u64,
    step: usize,
) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut params = Vec::with_capacity(model.params().len());
    for (_, p) in model.params().iter() {
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len(),
        });
        push_f32(&mut payload, p.value.data());
    }
    let optimizer = match optimizer {
        Some(opt) => {
            if !opt.matches(model.params()) {
                return Err(Error::Contract("optimizer state does not match the model".into()));
            }
            let first_moment_offset = payload.len();
            opt.m.iter().for_each(|m| push_f32(&mut payload, m));
            let second_moment_offset = payload.len();
            opt.v.iter().for_each(|v| push_f32(&mut payload, v));
            Some(OptimizerEntry { step: opt.step, adam: opt.config.clone(), first_moment_offset, second_moment_offset })
        }
        None => None,
    };
    let manifest = serde_json::to_vec(&Manifest { seed, step, config: model.config().clone(), params, optimizer })?;

    let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + manifest.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(payload: &[u8], offset: usize, len: usize) -> Result<Vec<f64>> {
    let bytes = payload
        .get(offset..offset + 4 * len)
        .ok_or_else(|| Error::Format("checkpoint payload is truncated".into()))?;
    Ok(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

/// Reads a checkpoint; nothing is returned unless every tensor is present and well formed.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Format(format!("checkpoint {} does not exist", path.display())));
    }
    let bytes = fs::read(path)?;
    let header = CHECKPOINT_MAGIC.len() + 8;
    if bytes.len() < header || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an MTTU1 checkpoint".into()));
    }
    let len_bytes: [u8; 8] = bytes[CHECKPOINT_MAGIC.len()..header].try_into().expect("eight bytes");
    let manifest_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Format("manifest length overflows".into()))?;
    let manifest_bytes = bytes
        .get(header..header.saturating_add(manifest_len))
        .ok_or_else(|| Error::Format("checkpoint manifest is truncated".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    let payload = &bytes[header + manifest_len..];

    let mut model = MtTransUNet::new(manifest.config.clone(), manifest.seed)?;
    let mut seen = HashSet::new();
    let mut expected_len = 0;
    for entry in &manifest.params {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype `{}`", entry.dtype)));
        }
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::Format(format!("parameter `{}` listed twice", entry.name)));
        }
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", entry.name)))?;
        if model.params().value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("shape mismatch for `{}`", entry.name)));
        }
        let n = entry.shape.iter().product::<usize>();
        let values = read_f32(payload, entry.offset, n)?;
        model.params_mut().value_mut(id).data_mut().copy_from_slice(&values);
        expected_len = expected_len.max(entry.offset + 4 * n);
    }
    if seen.len() != model.params().len() {
        return Err(Error::Format("checkpoint is missing parameters".into()));
    }

    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.value.len()).collect();
            let total: usize = sizes.iter().sum();
            let unpack = |offset: usize| -> Result<Vec<Vec<f64>>> {
                let flat = read_f32(payload, offset, total)?;
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &n in &sizes {
                    out.push(flat[at..at + n].to_vec());
                    at += n;
                }
                Ok(out)
            };
            expected_len = expected_len.max(o.second_moment_offset + 4 * total).max(o.first_moment_offset + 4 * total);
            Some(OptimizerState { config: o.adam.clone(), step: o.step, m: unpack(o.first_moment_offset)?, v: unpack(o.second_moment_offset)? })
        }
        None => None,
    };
    if payload.len() != expected_len {
        return Err(Error::Format(format!("payload holds {} bytes, manifest describes {expected_len}", payload.len())));
    }
    Ok(Checkpoint { model, optimizer, seed: manifest.seed, step: manifest.step })
}
