use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelState, RngState};
use super::UNetConfig;
use crate::error::{Error, Result};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MUNT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    step: u64,
    epoch: u64,
    rng: RngState,
    pseudo_dice_ema: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// Layout: magic, u16 version, u32 header length, JSON header, then for each
/// tensor its weights, first and second moments as little-endian f32.
pub fn checkpoint_encode<T: Real>(model: &ModelState<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        step: model.step,
        epoch: model.epoch,
        rng: RngState::capture(&model.rng),
        pseudo_dice_ema: model.pseudo_dice_ema,
        tensors: model
            .param_info()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = model.parameter_count() * 3;
    let mut out = Vec::with_capacity(10 + json.len() + 4 * floats);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for i in 0..model.params.len() {
        for t in [&model.params[i], &model.adam_m[i], &model.adam_v[i]] {
            for v in t.iter() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn checkpoint_decode(bytes: &[u8]) -> Result<ModelState<f32>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing MUNT magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut cursor = &bytes[10 + len..];
    let mut take = |n: usize| -> Result<Vec<f32>> {
        if cursor.len() < 4 * n {
            return Err(bad("truncated tensor data"));
        }
        let (head, rest) = cursor.split_at(4 * n);
        cursor = rest;
        Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    };
    let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for t in &header.tensors {
        let n = t.shape.iter().product();
        params.push(take(n)?);
        m.push(take(n)?);
        v.push(take(n)?);
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = ModelState::from_parts(
        header.config,
        params,
        m,
        v,
        header.step,
        header.epoch,
        header.rng.restore()?,
        header.pseudo_dice_ema,
    )?;
    for (info, t) in model.param_info().iter().zip(&header.tensors) {
        if info.name != t.name || info.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not match the architecture ({})",
                t.name, info.name
            )));
        }
    }
    if model.params.iter().flatten().any(|x| !x.is_finite()) {
        return Err(bad("non-finite weight"));
    }
    Ok(model)
}

pub fn checkpoint_save<T: Real>(model: &ModelState<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<ModelState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_decode(&bytes)
}
