//! Checkpoint file: magic, version, JSON header, little-endian f32 payload, CRC32.

use std::fs;
use std::path::Path;

use linearize_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{LoraConfig, Model, ModelConfig, ParamKind, ParamStore};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LOLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * p.tensor.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        lora: model.lora().cloned(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in model.params().iter() {
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingCheckpoint(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if buf.len() < 20 || &buf[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| corrupt("header length"))?)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[header_end..];
    let mut params = ParamStore::default();
    let mut expected_offset = 0u64;
    for t in header.tensors {
        if t.dtype != "f32" {
            return Err(corrupt(format!("unsupported dtype {}", t.dtype)));
        }
        if t.offset != expected_offset {
            return Err(corrupt(format!("tensor {} at unexpected offset", t.name)));
        }
        let numel: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * numel;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| corrupt(format!("payload truncated at {}", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(t.name, t.kind, Tensor::new(t.shape, data).map_err(|e| corrupt(e.to_string()))?)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(corrupt("trailing payload bytes"));
    }
    let model = Model::from_parts(header.config, params, header.lora);
    check_layout(&model)?;
    Ok(model)
}

/// The stored tensors must be exactly the ones a model of this config would own.
fn check_layout(model: &Model) -> Result<()> {
    let mut reference = Model::build(model.config().clone())?;
    if let Some(l) = model.lora() {
        reference.attach_lora(l.clone(), 0)?;
    }
    let ours: Vec<_> = model.params().iter().map(|p| (&p.name, p.kind, p.tensor.shape())).collect();
    let want: Vec<_> = reference.params().iter().map(|p| (&p.name, p.kind, p.tensor.shape())).collect();
    if ours != want {
        return Err(corrupt("tensor table does not match the stored config"));
    }
    Ok(())
}
