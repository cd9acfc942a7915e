//! Binary parameter container plus a JSON sidecar describing the model.
//!
//! Layout (little-endian): magic `SPKT`, u32 version, u32 record count, then
//! per record: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], and the
//! tensor payload as f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

use super::{ModelConfig, SpottingModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPKT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn encode(model: &SpottingModel) -> Result<Vec<u8>> {
    let tensors = model.params().tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::TruncatedPayload {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Record>, FormatError> {
    if bytes.len() < 12 {
        return Err(FormatError::TruncatedHeader);
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| FormatError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// Writes `path` (binary tensors) and its `.json` sidecar.
pub fn save_checkpoint(model: &SpottingModel, class_names: &[String], seed: u64, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: "SPKT".into(),
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        class_names: class_names.to_vec(),
        seed,
    };
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SpottingModel, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode(&bytes)?;

    let mut model = SpottingModel::zeroed(meta.model.clone())?;
    {
        let params = model.params_mut();
        let mut slots = params.tensors_mut();
        if slots.len() != records.len() {
            return Err(FormatError::Malformed(format!(
                "expected {} tensors, found {}",
                slots.len(),
                records.len()
            ))
            .into());
        }
        for ((name, dst), rec) in slots.iter_mut().zip(&records) {
            if *name != rec.name || dst.len() != rec.data.len() {
                return Err(FormatError::Malformed(format!(
                    "tensor {:?} ({} values) does not match expected {name:?} ({} values)",
                    rec.name,
                    rec.data.len(),
                    dst.len()
                ))
                .into());
            }
            for (d, &s) in dst.iter_mut().zip(&rec.data) {
                *d = f64::from(s);
            }
        }
    }
    Ok((model, meta))
}
