//! Checkpoint container.
//!
//! Layout: the magic `ALEDCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then one little-endian
//! blob holding every tensor back to back. The header lists each tensor's
//! name, shape and byte range. Parameters are stored as `param/<name>` with the
//! canonical names documented in [`crate::network`]; optimizer moments as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::trainer::{Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"ALEDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    /// Adam update count for moment tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Element type of every tensor (`f32` or `f64`).
    pub dtype: String,
    pub step: u64,
    pub epoch: usize,
    pub next_batch: usize,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::InvalidArgument(format!("cannot checkpoint {other:?} tensors"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidArgument(format!("cannot checkpoint {other:?} tensors"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: &str, path: &Path) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = match dtype {
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => return Err(Error::format(path, format!("tensor of shape {shape:?} has {} bytes", bytes.len()))),
    };
    Ok(t)
}

/// Writes the trainer state to `path`.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let vars = trainer.model.named_vars();
    let dtype = vars
        .first()
        .map(|(_, v)| v.dtype())
        .ok_or_else(|| Error::InvalidArgument("model has no parameters".into()))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor, updates: Option<u64>, blob: &mut Vec<u8>| -> Result<()> {
        let bytes = tensor_bytes(t)?;
        tensors.push(TensorEntry {
            name,
            shape: t.dims().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
            updates,
        });
        blob.extend_from_slice(&bytes);
        Ok(())
    };
    for (name, var) in &vars {
        push(format!("param/{name}"), var.as_tensor(), None, &mut blob)?;
    }
    for (name, (t, m, v)) in &trainer.optimizer.moments {
        push(format!("adam.m/{name}"), m, Some(*t), &mut blob)?;
        push(format!("adam.v/{name}"), v, Some(*t), &mut blob)?;
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        network: *trainer.model.config(),
        train: trainer.config.clone(),
        dtype: dtype_name(dtype)?.to_string(),
        step: trainer.step,
        epoch: trainer.epoch,
        next_batch: trainer.next_batch,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Header and named tensors of a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, (Tensor, Option<u64>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let blob_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..blob_start]).map_err(|e| Error::format(path, e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = &bytes[blob_start..];
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let range = usize::try_from(entry.offset)
            .ok()
            .zip(usize::try_from(entry.len).ok())
            .and_then(|(o, l)| Some(o..o.checked_add(l)?))
            .filter(|r| r.end <= blob.len())
            .ok_or_else(|| Error::format(path, format!("tensor {} lies outside the file", entry.name)))?;
        let t = tensor_from_bytes(&blob[range], &entry.shape, &header.dtype, path)?;
        tensors.insert(entry.name.clone(), (t, entry.updates));
    }
    Ok((header, tensors))
}

fn restore_params(model: &Model, tensors: &BTreeMap<String, (Tensor, Option<u64>)>, path: &Path) -> Result<()> {
    let vars = model.named_vars();
    let stored = tensors.keys().filter(|k| k.starts_with("param/")).count();
    if stored != vars.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {stored} parameters, network has {}", vars.len()),
        ));
    }
    for (name, var) in vars {
        let (t, _) = tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::format(
                path,
                format!("parameter {name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
            ));
        }
        var.set(t)?;
    }
    Ok(())
}

/// Loads only the network, for evaluation and inference.
pub fn load_model(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    let model = model_from(&header, &tensors, path)?;
    Ok((model, header))
}

fn model_from(header: &CheckpointHeader, tensors: &BTreeMap<String, (Tensor, Option<u64>)>, path: &Path) -> Result<Model> {
    let dtype = if header.dtype == "f64" { DType::F64 } else { DType::F32 };
    let model = Model::new(header.network, dtype, 0)?;
    restore_params(&model, tensors, path)?;
    Ok(model)
}

/// Restores a trainer, optimizer state and schedule position included.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let (header, tensors) = read_checkpoint(path)?;
    let model = model_from(&header, &tensors, path)?;
    let mut optimizer = Adam::new(header.train.learning_rate);
    for (key, (m, updates)) in tensors.range("adam.m/".to_string()..) {
        let Some(name) = key.strip_prefix("adam.m/") else { break };
        let (v, _) = tensors
            .get(&format!("adam.v/{name}"))
            .ok_or_else(|| Error::format(path, format!("missing second moment for {name}")))?;
        optimizer
            .moments
            .insert(name.to_string(), (updates.unwrap_or(0), m.clone(), v.clone()));
    }
    Ok(Trainer {
        model,
        optimizer,
        config: header.train,
        step: header.step,
        epoch: header.epoch,
        next_batch: header.next_batch,
    })
}

/// Parameter bytes in canonical order, for comparing two models.
pub fn parameter_blob(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (_, var) in model.named_vars() {
        out.extend(tensor_bytes(var.as_tensor())?);
    }
    Ok(out)
}
