//! Feature and label files, training chunks, and the synthetic dataset.

mod io;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use io::{
    decode_features, encode_features, load_features, load_labels, save_features, save_labels, ClassVocabulary,
    LabelRecord, FEATURE_MAGIC, FEATURE_VERSION,
};
pub(crate) use io::{read_json, write_json};
pub use synth::{
    class_patterns, generate_synthetic, synth_classes, synth_patterns, write_synthetic, SynthSpec, SynthVideo, SYNTH_SPEC_FILE,
};

pub const CLASSES_FILE: &str = "classes.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub frame_rate: f64,
    pub features: Matrix,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, frame_rate: f64, features: Matrix) -> Result<Self> {
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        if features.rows() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(Self { video_id: video_id.into(), frame_rate, features })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn duration_ms(&self) -> u64 {
        ms_of_frame(self.frames(), self.frame_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub class_index: usize,
    pub position_ms: u64,
    pub visible: bool,
}

/// Index of the frame whose time span contains `position_ms`.
pub fn frame_of_ms(position_ms: u64, frame_rate: f64) -> usize {
    (position_ms as f64 * frame_rate / 1000.0 + 1e-9).floor() as usize
}

pub fn ms_of_frame(frame: usize, frame_rate: f64) -> u64 {
    (frame as f64 * 1000.0 / frame_rate).round() as u64
}

/// Number of frames in `seconds`, provided it is a whole number.
pub fn whole_frames(seconds: f64, frame_rate: f64) -> Result<usize> {
    let frames = seconds * frame_rate;
    let rounded = frames.round();
    if !frames.is_finite() || rounded < 0.0 || (frames - rounded).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{seconds} s at {frame_rate} fps is not a whole number of frames"
        )));
    }
    Ok(rounded as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingChunk {
    pub frames: Matrix,
    pub target: Vec<f64>,
    pub center_ms: u64,
}

/// Cuts `seq` into consecutive disjoint windows of `chunk_s` seconds and
/// labels each with every action class occurring inside it. With
/// `background` an extra last target unit is set on chunks holding no action.
pub fn make_training_chunks(
    seq: &FeatureSequence,
    labels: &[GroundTruthAction],
    chunk_s: f64,
    action_classes: usize,
    background: bool,
) -> Result<Vec<TrainingChunk>> {
    let len = whole_frames(chunk_s, seq.frame_rate)?;
    if len < 2 {
        return Err(Error::invalid(format!("chunks must span at least 2 frames, got {len}")));
    }
    if let Some(bad) = labels.iter().find(|a| a.class_index >= action_classes) {
        return Err(Error::invalid(format!(
            "class index {} out of range for {action_classes} classes",
            bad.class_index
        )));
    }
    let width = action_classes + usize::from(background);
    let count = seq.frames() / len;
    let mut targets = vec![vec![0.0; width]; count];
    for action in labels {
        let chunk = frame_of_ms(action.position_ms, seq.frame_rate) / len;
        if let Some(t) = targets.get_mut(chunk) {
            t[action.class_index] = 1.0;
        }
    }
    Ok(targets
        .into_iter()
        .enumerate()
        .map(|(k, mut target)| {
            if background && target.iter().all(|&v| v == 0.0) {
                target[action_classes] = 1.0;
            }
            TrainingChunk {
                frames: seq.features.slice_rows(k * len..(k + 1) * len),
                target,
                center_ms: ms_of_frame(k * len + len / 2, seq.frame_rate),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub labels: Vec<GroundTruthAction>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: ClassVocabulary,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let classes = ClassVocabulary::load(&root.join(CLASSES_FILE))?;
        Ok(Self { root, classes })
    }

    /// Video ids of a split, sorted.
    pub fn video_ids(&self, split: &str) -> Result<Vec<String>> {
        let dir = self.root.join(split);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "feat") {
                ids.push(io::video_id_of(&path));
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_video(&self, split: &str, id: &str) -> Result<Video> {
        let dir = self.root.join(split);
        let features = load_features(&dir.join(format!("{id}.feat")))?;
        let labels = load_labels(&dir.join(format!("{id}.labels.json")), &self.classes)?;
        Ok(Video { features, labels })
    }

    /// Loads every video of a split in parallel, ordered by id.
    pub fn load_split(&self, split: &str) -> Result<Vec<Video>> {
        let ids = self.video_ids(split)?;
        let videos = ids.par_iter().map(|id| self.load_video(split, id)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = videos.first() {
            let dim = first.features.dim();
            if let Some(v) = videos.iter().find(|v| v.features.dim() != dim) {
                return Err(Error::shape("dataset feature dim", dim, v.features.dim()));
            }
        }
        Ok(videos)
    }
}

/// Reads the label file of every video in `dir` and returns them by video id.
pub fn load_truth_dir(dir: &Path, classes: &ClassVocabulary) -> Result<Vec<(String, Vec<GroundTruthAction>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".labels.json")) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| Ok((io::video_id_of(p), load_labels(p, classes)?))).collect()
}

#[cfg(test)]
mod tests;
