use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    io::write_json, ms_of_frame, save_features, save_labels, whole_frames, ClassVocabulary, FeatureSequence,
    GroundTruthAction, CLASSES_FILE, SPLITS,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Stream id reserved for drawing the pattern directions; videos use their
/// global index as stream id.
const PATTERN_STREAM: u64 = u64::MAX;

pub const SYNTH_SPEC_FILE: &str = "synth.json";

/// Parameters of the synthetic dataset.
///
/// Classes come in pairs `(2p, 2p + 1)` built from two pattern directions
/// `P` and `Q`: class `2p` shows `P` before the action and `Q` after it,
/// class `2p + 1` shows `Q` before and `P` after. A window centered on an
/// action therefore holds the same frames for both classes up to order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_games: usize,
    pub val_games: usize,
    pub test_games: usize,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub dim: usize,
    pub pairs: usize,
    /// Standard deviation of the background noise.
    pub sigma: f64,
    /// Length of the pattern added along the class direction.
    pub amplitude: f64,
    pub before_s: f64,
    pub after_s: f64,
    pub actions_per_game: usize,
    pub min_gap_s: f64,
    pub visible_prob: f64,
    pub retry_budget: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_games: 12,
            val_games: 4,
            test_games: 24,
            duration_s: 1800.0,
            frame_rate: 2.0,
            dim: 32,
            pairs: 2,
            sigma: 1.0,
            amplitude: 4.0,
            before_s: 7.5,
            after_s: 7.5,
            actions_per_game: 15,
            min_gap_s: 75.0,
            visible_prob: 0.8,
            retry_budget: 1000,
        }
    }
}

impl SynthSpec {
    pub fn class_count(&self) -> usize {
        2 * self.pairs
    }

    pub fn games(&self, split: &str) -> usize {
        match split {
            "train" => self.train_games,
            "val" => self.val_games,
            "test" => self.test_games,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::invalid("synthetic data needs at least one class pair"));
        }
        if self.dim < 2 * self.pairs {
            return Err(Error::invalid(format!(
                "dim {} too small for {} orthogonal patterns",
                self.dim,
                2 * self.pairs
            )));
        }
        if !(self.sigma > 0.0 && self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::invalid("sigma must be positive and amplitude non-negative"));
        }
        if !(0.0..=1.0).contains(&self.visible_prob) {
            return Err(Error::invalid("visible_prob must be within [0, 1]"));
        }
        if self.min_gap_s < self.before_s + self.after_s {
            return Err(Error::invalid("min_gap_s must cover both pattern extents"));
        }
        let before = whole_frames(self.before_s, self.frame_rate)?;
        let after = whole_frames(self.after_s, self.frame_rate)?;
        let frames = whole_frames(self.duration_s, self.frame_rate)?;
        if before == 0 || after == 0 || frames < before + after + 1 {
            return Err(Error::invalid("video too short for the pattern extents"));
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        whole_frames(self.duration_s, self.frame_rate).expect("validated")
    }
}

pub fn synth_classes(spec: &SynthSpec) -> ClassVocabulary {
    let names = (0..spec.pairs)
        .flat_map(|p| [format!("pair{p}_forward"), format!("pair{p}_reverse")])
        .collect();
    ClassVocabulary::new(names).expect("generated names are unique")
}

/// Orthonormal pattern directions, one row per pattern.
pub fn synth_patterns(spec: &SynthSpec) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(PATTERN_STREAM);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < 2 * spec.pairs {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| normal.sample(&mut rng)).collect();
        for r in &rows {
            let proj = crate::numerics::dot(r, &v);
            crate::numerics::axpy(-proj, r, &mut v);
        }
        let norm = crate::numerics::norm2(&v);
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("equal row lengths")
}

/// Pattern rows shown before and after an action of `class`.
pub fn class_patterns(class: usize) -> (usize, usize) {
    let pair = class / 2;
    if class % 2 == 0 {
        (2 * pair, 2 * pair + 1)
    } else {
        (2 * pair + 1, 2 * pair)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub split: &'static str,
    pub features: FeatureSequence,
    pub labels: Vec<GroundTruthAction>,
}

fn generate_video(spec: &SynthSpec, patterns: &Matrix, split: &'static str, index: u64) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let frames = spec.frames();
    let before = whole_frames(spec.before_s, spec.frame_rate)?;
    let after = whole_frames(spec.after_s, spec.frame_rate)?;
    let gap = (spec.min_gap_s * spec.frame_rate).ceil() as usize;

    let mut anchors: Vec<usize> = Vec::with_capacity(spec.actions_per_game);
    for _ in 0..spec.actions_per_game {
        let mut placed = false;
        for _ in 0..spec.retry_budget.max(1) {
            let f = rng.random_range(before..=frames - after);
            if anchors.iter().all(|&a| a.abs_diff(f) >= gap) {
                anchors.push(f);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {} actions {} s apart in a {} s video within {} draws",
                spec.actions_per_game, spec.min_gap_s, spec.duration_s, spec.retry_budget
            )));
        }
    }
    anchors.sort_unstable();
    let labels: Vec<GroundTruthAction> = anchors
        .iter()
        .map(|&f| GroundTruthAction {
            class_index: rng.random_range(0..spec.class_count()),
            position_ms: ms_of_frame(f, spec.frame_rate),
            visible: rng.random_bool(spec.visible_prob),
        })
        .collect();

    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data: Vec<f64> = (0..frames * spec.dim).map(|_| noise.sample(&mut rng)).collect();
    for (&f, action) in anchors.iter().zip(&labels) {
        let (pb, pa) = class_patterns(action.class_index);
        for (range, p) in [(f - before..f, pb), (f..f + after, pa)] {
            for frame in range {
                let row = &mut data[frame * spec.dim..(frame + 1) * spec.dim];
                crate::numerics::axpy(spec.amplitude, patterns.row(p), row);
            }
        }
    }
    data.iter_mut().for_each(|v| *v = f64::from(*v as f32));

    let features = FeatureSequence::new(format!("game_{index:03}"), spec.frame_rate, Matrix::from_vec(frames, spec.dim, data)?)?;
    Ok(SynthVideo { split, features, labels })
}

/// Generates every video of the dataset in memory, train first, then val
/// and test. Each video draws from its own random stream.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let patterns = synth_patterns(spec);
    let mut jobs = Vec::new();
    for split in SPLITS {
        for _ in 0..spec.games(split) {
            jobs.push((split, jobs.len() as u64));
        }
    }
    jobs.par_iter().map(|&(split, index)| generate_video(spec, &patterns, split, index)).collect()
}

/// Writes the dataset under `out` in the standard directory layout.
pub fn write_synthetic(spec: &SynthSpec, out: &Path) -> Result<Vec<SynthVideo>> {
    let videos = generate_synthetic(spec)?;
    let classes = synth_classes(spec);
    for split in SPLITS {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    classes.save(&out.join(CLASSES_FILE))?;
    write_json(&out.join(SYNTH_SPEC_FILE), spec)?;
    videos.par_iter().try_for_each(|v| {
        let dir = out.join(v.split);
        save_features(&v.features, &dir.join(format!("{}.feat", v.features.video_id)))?;
        save_labels(&v.labels, &classes, &dir.join(format!("{}.labels.json", v.features.video_id)))
    })?;
    Ok(videos)
}
