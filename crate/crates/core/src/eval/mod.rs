//! Action-spotting metric: per-class AP within a tolerance, mAP, and the
//! Average-mAP over a sweep of tolerances.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_truth_dir, ClassVocabulary, GroundTruthAction};
use crate::error::{Error, Result};
use crate::spotting::{Spot, SpotFile};

/// Tolerances of the standard sweep, 5 s to 60 s in steps of 5 s.
pub fn default_deltas() -> Vec<f64> {
    (1..=12).map(|i| 5.0 * f64::from(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// One flag per prediction, in input order.
    pub true_positive: Vec<bool>,
    /// Matched prediction index for each ground-truth action.
    pub matched_by: Vec<Option<usize>>,
}

/// One-to-one matching of predictions to same-class ground truth within
/// `delta_s`.
///
/// Predictions are visited by descending confidence (input order on ties).
/// Each claims the nearest free action in range; when none is free it may
/// take one from an earlier prediction that can move to another action in
/// its own range, so earlier predictions never lose their match. The result
/// has the largest possible number of true positives and, among those, the
/// earliest ones in confidence order.
pub fn match_spots(predictions: &[Spot], truth: &[GroundTruthAction], delta_s: f64) -> MatchResult {
    let radius = delta_s * 1000.0;
    let within = |p: &Spot, g: &GroundTruthAction| {
        p.class_index == g.class_index && (p.position_ms as f64 - g.position_ms as f64).abs() <= radius
    };
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence).then(a.cmp(&b)));

    let mut matched_by: Vec<Option<usize>> = vec![None; truth.len()];
    let mut true_positive = vec![false; predictions.len()];
    for &p in &order {
        let nearest_free = truth
            .iter()
            .enumerate()
            .filter(|&(g, gt)| matched_by[g].is_none() && within(&predictions[p], gt))
            .min_by_key(|&(g, gt)| (gt.position_ms.abs_diff(predictions[p].position_ms), g))
            .map(|(g, _)| g);
        let found = match nearest_free {
            Some(g) => {
                matched_by[g] = Some(p);
                true
            }
            None => {
                let mut visited = vec![false; truth.len()];
                augment(p, predictions, truth, &within, &mut matched_by, &mut visited)
            }
        };
        true_positive[p] = found;
    }
    MatchResult { true_positive, matched_by }
}

fn augment(
    p: usize,
    predictions: &[Spot],
    truth: &[GroundTruthAction],
    within: &impl Fn(&Spot, &GroundTruthAction) -> bool,
    matched_by: &mut [Option<usize>],
    visited: &mut [bool],
) -> bool {
    for g in 0..truth.len() {
        if visited[g] || !within(&predictions[p], &truth[g]) {
            continue;
        }
        visited[g] = true;
        let free = match matched_by[g] {
            None => true,
            Some(q) => augment(q, predictions, truth, within, matched_by, visited),
        };
        if free {
            matched_by[g] = Some(p);
            return true;
        }
    }
    false
}

/// Area under the precision-recall curve with all-point interpolation.
/// `flags` lists detections by descending confidence.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut hits = 0usize;
    for (i, &tp) in flags.iter().enumerate() {
        hits += usize::from(tp);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let area = flags.iter().zip(&precision).filter(|(&tp, _)| tp).fold(0.0, |acc, (_, &p)| acc + p);
    area / total_gt as f64
}

/// Predictions and ground truth of one video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VideoEval {
    pub video_id: String,
    pub predictions: Vec<Spot>,
    pub truth: Vec<GroundTruthAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// `ap[class][delta]`
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub average_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub deltas_s: Vec<f64>,
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub visible: MetricTable,
    pub unshown: MetricTable,
}

#[derive(Clone, Copy)]
enum Subset {
    All,
    Visible(bool),
}

impl Subset {
    fn contains(self, gt: &GroundTruthAction) -> bool {
        match self {
            Subset::All => true,
            Subset::Visible(v) => gt.visible == v,
        }
    }
}

/// AP of one class at one tolerance. Matching always runs against the full
/// ground truth; for a subset, detections matched to actions outside it are
/// dropped instead of counted as false positives.
fn class_ap(videos: &[VideoEval], class: usize, delta_s: f64, subset: Subset) -> f64 {
    let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
    let mut total_gt = 0;
    for (v, video) in videos.iter().enumerate() {
        let preds: Vec<Spot> = video.predictions.iter().filter(|s| s.class_index == class).copied().collect();
        let truth: Vec<GroundTruthAction> = video.truth.iter().filter(|g| g.class_index == class).copied().collect();
        total_gt += truth.iter().filter(|g| subset.contains(g)).count();
        let result = match_spots(&preds, &truth, delta_s);
        let mut owner = vec![None; preds.len()];
        for (g, m) in result.matched_by.iter().enumerate() {
            if let Some(p) = m {
                owner[*p] = Some(g);
            }
        }
        for (p, spot) in preds.iter().enumerate() {
            match owner[p] {
                Some(g) if !subset.contains(&truth[g]) => {}
                _ => ranked.push((spot.confidence, v, result.true_positive[p])),
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
    average_precision(&flags, total_gt)
}

fn metric_table(videos: &[VideoEval], classes: usize, deltas: &[f64], subset: Subset) -> MetricTable {
    let cells: Vec<f64> = (0..classes * deltas.len())
        .into_par_iter()
        .map(|i| class_ap(videos, i / deltas.len(), deltas[i % deltas.len()], subset))
        .collect();
    let ap: Vec<Vec<f64>> = cells.chunks(deltas.len()).map(<[f64]>::to_vec).collect();
    let map: Vec<f64> = (0..deltas.len())
        .map(|d| if classes == 0 { 0.0 } else { ap.iter().map(|row| row[d]).sum::<f64>() / classes as f64 })
        .collect();
    let average_map = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    MetricTable { ap, map, average_map }
}

/// AP for every (class, tolerance), the class mean per tolerance, and the
/// mean over tolerances, for all actions and for the visible and unshown
/// subsets.
pub fn average_map(videos: &[VideoEval], classes: &ClassVocabulary, deltas: &[f64]) -> Result<EvalReport> {
    if deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid("tolerances must be finite and non-negative"));
    }
    for v in videos {
        if let Some(s) = v.predictions.iter().find(|s| s.class_index >= classes.len()) {
            return Err(Error::invalid(format!("{}: prediction class {} out of range", v.video_id, s.class_index)));
        }
        if let Some(s) = v.predictions.iter().find(|s| !s.confidence.is_finite()) {
            return Err(Error::invalid(format!("{}: non-finite confidence {}", v.video_id, s.confidence)));
        }
        if let Some(g) = v.truth.iter().find(|g| g.class_index >= classes.len()) {
            return Err(Error::invalid(format!("{}: label class {} out of range", v.video_id, g.class_index)));
        }
    }
    let n = classes.len();
    let all = metric_table(videos, n, deltas, Subset::All);
    Ok(EvalReport {
        classes: classes.names().to_vec(),
        deltas_s: deltas.to_vec(),
        ap: all.ap,
        map: all.map,
        average_map: all.average_map,
        visible: metric_table(videos, n, deltas, Subset::Visible(true)),
        unshown: metric_table(videos, n, deltas, Subset::Visible(false)),
    })
}

impl EvalReport {
    /// Plain-text table: one row per class with AP at each tolerance.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "class");
        for d in &self.deltas_s {
            let _ = write!(out, " {:>6}", format!("{d}s"));
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.ap) {
            let _ = write!(out, "{name:<width$}");
            for ap in row {
                let _ = write!(out, " {:>6.2}", 100.0 * ap);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", "mAP");
        for m in &self.map {
            let _ = write!(out, " {:>6.2}", 100.0 * m);
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "Average-mAP {:.2}  shown {:.2}  unshown {:.2}",
            100.0 * self.average_map,
            100.0 * self.visible.average_map,
            100.0 * self.unshown.average_map
        );
        out
    }
}

/// Loads predictions from a spot file, a JSON array of spot files, or a
/// directory of spot files, and ground truth from a directory of label
/// files. Videos without predictions are evaluated with none.
pub fn load_eval_inputs(pred: &Path, truth_dir: &Path, classes: &ClassVocabulary) -> Result<Vec<VideoEval>> {
    let files = load_spot_files(pred)?;
    let mut videos: Vec<VideoEval> = load_truth_dir(truth_dir, classes)?
        .into_iter()
        .map(|(video_id, truth)| VideoEval { video_id, predictions: Vec::new(), truth })
        .collect();
    for file in files {
        let video = videos
            .iter_mut()
            .find(|v| v.video_id == file.video_id)
            .ok_or_else(|| Error::invalid(format!("predictions for unknown video {:?}", file.video_id)))?;
        video.predictions.extend(file.spots(classes)?);
    }
    Ok(videos)
}

fn load_spot_files(path: &Path) -> Result<Vec<SpotFile>> {
    if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|e| e == "json") && !p.ends_with("run_config.json") {
                paths.push(p);
            }
        }
        paths.sort();
        let mut files = Vec::new();
        for p in paths {
            files.extend(load_spot_files(&p)?);
        }
        return Ok(files);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if value.is_array() {
        serde_json::from_value(value).map_err(|e| Error::json(path, e))
    } else {
        Ok(vec![serde_json::from_value(value).map_err(|e| Error::json(path, e))?])
    }
}
