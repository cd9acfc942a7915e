use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureSequence, GroundTruthAction};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 20;

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let (rows, cols) = seq.features.shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&(seq.frame_rate as f32).to_le_bytes());
    for &v in seq.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(video_id: &str, bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedHeader.into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic { expected: FEATURE_MAGIC, found: magic }.into());
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(FormatError::TruncatedHeader.into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("length checked"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let frame_rate = f32::from_le_bytes(bytes[16..20].try_into().expect("length checked"));

    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Malformed(format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload { expected, actual: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        ))
        .into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect();
    FeatureSequence::new(video_id, f64::from(frame_rate), Matrix::from_vec(rows, cols, data)?)
}

pub fn save_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

/// Reads a feature file. The video id is the file name up to its first dot.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&video_id_of(path), &bytes)
}

pub(crate) fn video_id_of(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.split_once('.') {
        Some((stem, _)) => stem.to_string(),
        None => name,
    }
}

/// Label names and their output-unit indices, as stored in `classes.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate class label {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect()
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut names = vec![None; map.len()];
        for (label, index) in map {
            match names.get_mut(index) {
                Some(slot @ None) => *slot = Some(label),
                _ => return Err(Error::invalid(format!("class indices must be 0..{} without gaps", names.len()))),
            }
        }
        Self::new(names.into_iter().map(|n| n.expect("every slot filled")).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_map(read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label: String,
    pub position_ms: u64,
    pub visible: bool,
}

pub fn save_labels(actions: &[GroundTruthAction], classes: &ClassVocabulary, path: &Path) -> Result<()> {
    let records = actions
        .iter()
        .map(|a| {
            let label = classes
                .name(a.class_index)
                .ok_or_else(|| Error::invalid(format!("class index {} out of range", a.class_index)))?;
            Ok(LabelRecord { label: label.to_string(), position_ms: a.position_ms, visible: a.visible })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(path, &records)
}

pub fn load_labels(path: &Path, classes: &ClassVocabulary) -> Result<Vec<GroundTruthAction>> {
    let records: Vec<LabelRecord> = read_json(path)?;
    records
        .into_iter()
        .map(|r| {
            let class_index = classes
                .index_of(&r.label)
                .ok_or_else(|| Error::invalid(format!("{}: unknown label {:?}", path.display(), r.label)))?;
            Ok(GroundTruthAction { class_index, position_ms: r.position_ms, visible: r.visible })
        })
        .collect()
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
