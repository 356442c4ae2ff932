//! `GCKP` checkpoint files.
//!
//! Layout: magic `GCKP`, u32 version, u64 header length, UTF-8 JSON header,
//! then little-endian f32 payloads in manifest order. The manifest lists the
//! model parameters followed by the AdamW moments (`optim.m.*`, `optim.v.*`).
//! Offsets are in bytes from the start of the payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Cursor;
use crate::error::{Error, Result};
use crate::model::{GcrlModel, ModelConfig};
use crate::tensor::{OptimState, Tensor};

const MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state at an epoch boundary. All random streams are counter-based,
/// so `(epoch, step)` is the complete RNG cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: GcrlModel,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    /// Training-set counts of the first raster token.
    pub first_token_counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: u32,
    step: u64,
    optim_step: u64,
    param_steps: Vec<(String, u64)>,
    first_token_counts: Vec<u64>,
    tensors: Vec<ManifestEntry>,
}

fn first_difference(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (oa, ob) = (va.as_object()?, vb.as_object()?);
    oa.iter().find(|(k, v)| ob.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

impl Checkpoint {
    /// Errors with the first differing field when `expected` does not describe
    /// this checkpoint's model.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        match first_difference(&self.model.config, expected) {
            None => Ok(()),
            Some(field) => {
                let get = |c: &ModelConfig| serde_json::to_value(c).ok().and_then(|v| v.get(&field).cloned());
                Err(Error::config(
                    format!("model.{field}"),
                    format!(
                        "checkpoint has {}, config has {}",
                        get(&self.model.config).unwrap_or_default(),
                        get(expected).unwrap_or_default()
                    ),
                ))
            }
        }
    }

    fn tensors(&self) -> Vec<(String, &[f32], Vec<usize>)> {
        let mut out: Vec<(String, &[f32], Vec<usize>)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.data(), t.shape().to_vec()))
            .collect();
        for (tag, buf) in [("m", &self.optim.first), ("v", &self.optim.second)] {
            for (n, v) in buf {
                let shape = self.model.params.get(n).map_or(vec![v.len()], |t| t.shape().to_vec());
                out.push((format!("optim.{tag}.{n}"), v.as_slice(), shape));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut offset = 0u64;
        let manifest = tensors
            .iter()
            .map(|(name, data, shape)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len() as u64 * 4;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            optim_step: self.optim.step,
            param_steps: self.optim.param_steps.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            first_token_counts: self.first_token_counts.clone(),
            tensors: manifest,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data, _) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, validating every tensor against the shapes implied
    /// by the stored config. Nothing is returned unless the whole file is
    /// consistent.
    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut c = Cursor::new(bytes, what);
        c.magic(MAGIC)?;
        c.version(CHECKPOINT_VERSION)?;
        let len = c.u64()?;
        let header_at = c.offset();
        let json = c.take(usize::try_from(len).map_err(|_| c.error("header length overflow"))?)?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::format(what, header_at, format!("checkpoint header: {e}")))?;
        let payload_start = c.offset();

        let reference = GcrlModel::init(header.config.model.clone(), 0)?;
        let mut params = IndexMap::new();
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            let name = &entry.name;
            let (kind, base) = match name.strip_prefix("optim.m.") {
                Some(b) => (1, b),
                None => match name.strip_prefix("optim.v.") {
                    Some(b) => (2, b),
                    None => (0, name.as_str()),
                },
            };
            let want = reference.params.get(base).ok_or_else(|| {
                Error::format(
                    what,
                    header_at,
                    format!("tensor `{name}` is not a parameter of the configured model"),
                )
            })?;
            if entry.shape != want.shape() {
                return Err(Error::format(
                    what,
                    header_at,
                    format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        entry.shape,
                        want.shape()
                    ),
                ));
            }
            if entry.offset != expected_offset {
                return Err(Error::format(
                    what,
                    header_at,
                    format!("tensor `{name}` at offset {}, expected {expected_offset}", entry.offset),
                ));
            }
            let n = want.len();
            let data = c.f32s(n).map_err(|_| {
                Error::format(
                    what,
                    payload_start + expected_offset,
                    format!("payload of tensor `{name}` is truncated"),
                )
            })?;
            expected_offset += n as u64 * 4;
            match kind {
                0 => {
                    params.insert(name.clone(), Tensor::new(want.shape().to_vec(), data)?);
                }
                1 => {
                    first.insert(base.to_string(), data);
                }
                _ => {
                    second.insert(base.to_string(), data);
                }
            }
        }
        if c.offset() != bytes.len() as u64 {
            return Err(c.error(format!(
                "{} bytes beyond the last tensor",
                bytes.len() as u64 - c.offset()
            )));
        }
        if let Some(missing) = reference.params.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::format(
                what,
                header_at,
                format!("tensor `{missing}` missing from checkpoint"),
            ));
        }
        let model = GcrlModel {
            config: header.config.model.clone(),
            params: reference
                .params
                .keys()
                .map(|k| (k.clone(), params[k].clone()))
                .collect(),
        };
        if model.params.keys().ne(params.keys()) {
            return Err(Error::format(
                what,
                header_at,
                "tensors not in canonical parameter order",
            ));
        }
        let mut optim = OptimState::new(model.decay_mask());
        optim.step = header.optim_step;
        optim.first = first;
        optim.second = second;
        optim.param_steps = header.param_steps.into_iter().collect();
        Ok(Checkpoint {
            config: header.config,
            model,
            optim,
            epoch: header.epoch,
            step: header.step,
            first_token_counts: header.first_token_counts,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &Checkpoint) -> Result<()> {
    crate::data::write_bytes(path, &state.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
