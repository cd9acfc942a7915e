//! Dense sliding-window inference and temporal non-maximum suppression.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ms_of_frame, read_json, write_json, ClassVocabulary, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::SpottingModel;
use crate::numerics::Matrix;

/// Per-class confidence over time. Row `c` holds class `c` at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionnessCurve {
    pub scores: Matrix,
    pub positions_ms: Vec<u64>,
    /// Frames between consecutive positions of a dense curve.
    pub stride: usize,
}

impl ActionnessCurve {
    pub fn new(scores: Matrix, positions_ms: Vec<u64>, stride: usize) -> Result<Self> {
        if scores.cols() != positions_ms.len() {
            return Err(Error::shape("actionness curve", format!("{} positions", scores.cols()), positions_ms.len()));
        }
        if positions_ms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("curve positions must be strictly increasing"));
        }
        if scores.as_slice().iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("curve scores must lie in [0, 1]"));
        }
        Ok(Self { scores, positions_ms, stride })
    }

    pub fn classes(&self) -> usize {
        self.scores.rows()
    }

    pub fn positions(&self) -> usize {
        self.positions_ms.len()
    }
}

/// Slides the model window over every frame of `seq`. The window at frame
/// `p` spans `[p - before, p - before + len)`; frames outside the video are
/// zeros. The background output, if any, is left out of the curve.
pub fn dense_actionness(model: &SpottingModel, seq: &FeatureSequence) -> Result<ActionnessCurve> {
    let config = model.config();
    if seq.frames() < 2 {
        return Err(Error::invalid("dense inference needs at least 2 frames"));
    }
    if (config.window.frame_rate - seq.frame_rate).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "model expects {} fps, video has {}",
            config.window.frame_rate, seq.frame_rate
        )));
    }
    let len = config.window_frames();
    let before = config.window.frames_before();
    let projected = model.project(&seq.features)?;
    let padding = model.project(&Matrix::zeros(1, config.input_dim))?;
    let dim = projected.cols();

    let columns = (0..seq.frames())
        .into_par_iter()
        .map(|p| {
            let mut window = Matrix::zeros(len, dim);
            for r in 0..len {
                let frame = (p + r).checked_sub(before).filter(|&f| f < seq.frames());
                let src = match frame {
                    Some(f) => projected.row(f),
                    None => padding.row(0),
                };
                window.row_mut(r).copy_from_slice(src);
            }
            model.predict_projected(&window).map(|pred| pred.scores)
        })
        .collect::<Result<Vec<_>>>()?;

    let classes = config.action_classes;
    let scores = Matrix::from_fn(classes, seq.frames(), |c, p| columns[p][c]);
    let positions = (0..seq.frames()).map(|p| ms_of_frame(p, seq.frame_rate)).collect();
    ActionnessCurve::new(scores, positions, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub class_index: usize,
    pub position_ms: u64,
    pub confidence: f64,
}

/// Per class, repeatedly emits the highest remaining score (earliest on
/// ties) and discards every position within `t_nms_s / 2` of it. Stops when
/// the class is exhausted or the best score drops below `threshold`.
/// Spots come back ordered by position, then class.
pub fn nms(curve: &ActionnessCurve, t_nms_s: f64, threshold: Option<f64>) -> Result<Vec<Spot>> {
    if !(t_nms_s.is_finite() && t_nms_s > 0.0) {
        return Err(Error::invalid(format!("NMS window must be positive, got {t_nms_s}")));
    }
    let radius_ms = t_nms_s * 1000.0 / 2.0;
    let times = &curve.positions_ms;
    let mut spots = Vec::new();
    for class in 0..curve.classes() {
        let row = curve.scores.row(class);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut suppressed = vec![false; row.len()];
        for i in order {
            if suppressed[i] {
                continue;
            }
            if threshold.is_some_and(|t| row[i] < t) {
                break;
            }
            spots.push(Spot { class_index: class, position_ms: times[i], confidence: row[i] });
            let lo = times.partition_point(|&t| (times[i] as f64 - t as f64) > radius_ms);
            let hi = times.partition_point(|&t| (t as f64 - times[i] as f64) <= radius_ms);
            suppressed[lo..hi].iter_mut().for_each(|s| *s = true);
        }
    }
    spots.sort_by(|a, b| a.position_ms.cmp(&b.position_ms).then(a.class_index.cmp(&b.class_index)));
    Ok(spots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotRecord {
    pub label: String,
    pub position_ms: u64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotFile {
    pub video_id: String,
    pub predictions: Vec<SpotRecord>,
}

impl SpotFile {
    pub fn from_spots(video_id: impl Into<String>, spots: &[Spot], classes: &ClassVocabulary) -> Result<Self> {
        let predictions = spots
            .iter()
            .map(|s| {
                let label = classes
                    .name(s.class_index)
                    .ok_or_else(|| Error::invalid(format!("class index {} out of range", s.class_index)))?;
                Ok(SpotRecord { label: label.to_string(), position_ms: s.position_ms, confidence: s.confidence })
            })
            .collect::<Result<_>>()?;
        Ok(Self { video_id: video_id.into(), predictions })
    }

    /// Resolves labels against `classes`; unknown labels are an error.
    pub fn spots(&self, classes: &ClassVocabulary) -> Result<Vec<Spot>> {
        self.predictions
            .iter()
            .map(|r| {
                let class_index = classes
                    .index_of(&r.label)
                    .ok_or_else(|| Error::invalid(format!("{}: unknown label {:?}", self.video_id, r.label)))?;
                Ok(Spot { class_index, position_ms: r.position_ms, confidence: r.confidence })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests;
