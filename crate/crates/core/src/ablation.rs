//! Pooling-variant sweep: train one model per pooling layer on the same
//! data and compare Average-mAP on the test split.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassVocabulary, Video};
use crate::error::Result;
use crate::eval::{average_map, default_deltas, EvalReport, VideoEval};
use crate::model::{ModelConfig, ParamCount, SpottingModel};
use crate::pooling::{PoolKind, PoolSpec, TemporalWindow};
use crate::spotting::{dense_actionness, nms};
use crate::training::{chunks_for_model, train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub kind: PoolKind,
    pub temporally_aware: bool,
    pub clusters: usize,
}

impl Variant {
    pub fn name(&self) -> String {
        self.kind.display_name(self.temporally_aware)
    }

    /// Plain and ++ versions of every pooling kind.
    pub fn sweep(clusters: usize) -> Vec<Variant> {
        PoolKind::ALL
            .into_iter()
            .flat_map(|kind| {
                let k = if kind.has_clusters() { clusters } else { 0 };
                [false, true].map(|t| Variant { kind, temporally_aware: t, clusters: k })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub reduced_dim: Option<usize>,
    pub window_s: f64,
    pub dropout: f64,
    pub t_nms_s: f64,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::sweep(8),
            reduced_dim: Some(32),
            window_s: 15.0,
            dropout: 0.4,
            t_nms_s: 30.0,
            train: TrainConfig { batch_size: 64, max_epochs: 200, ..TrainConfig::default() },
        }
    }
}

/// Train, validation and test videos of one dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub classes: ClassVocabulary,
    pub train: Vec<Video>,
    pub val: Vec<Video>,
    pub test: Vec<Video>,
}

impl Splits {
    pub fn load(dataset: &crate::data::Dataset) -> Result<Self> {
        Ok(Self {
            classes: dataset.classes.clone(),
            train: dataset.load_split("train")?,
            val: dataset.load_split("val")?,
            test: dataset.load_split("test")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    pub params: ParamCount,
    pub best_epoch: usize,
    pub epochs: usize,
    pub report: EvalReport,
    pub train_seconds: f64,
}

pub fn model_config(variant: Variant, cfg: &AblationConfig, input_dim: usize, frame_rate: f64, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        reduced_dim: cfg.reduced_dim,
        pool: PoolSpec::new(variant.kind, variant.temporally_aware, variant.clusters),
        window: TemporalWindow::centered(frame_rate, cfg.window_s),
        action_classes: classes,
        background: true,
        dropout: cfg.dropout,
        normalize_frames: true,
    }
}

/// Dense inference and NMS over every video.
pub fn spot_videos(model: &SpottingModel, videos: &[Video], t_nms_s: f64) -> Result<Vec<VideoEval>> {
    videos
        .iter()
        .map(|v| {
            let curve = dense_actionness(model, &v.features)?;
            Ok(VideoEval {
                video_id: v.features.video_id.clone(),
                predictions: nms(&curve, t_nms_s, None)?,
                truth: v.labels.clone(),
            })
        })
        .collect()
}

/// Trains a fresh model with seed `cfg.train.seed` and returns it with its
/// log.
pub fn train_variant(variant: Variant, splits: &Splits, cfg: &AblationConfig) -> Result<(SpottingModel, TrainLog)> {
    let first = splits.train.first().ok_or(crate::Error::Empty("training split"))?;
    let config = model_config(variant, cfg, first.features.dim(), first.features.frame_rate, splits.classes.len());
    let model = SpottingModel::new(config, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let train_chunks = chunks_for_model(&splits.train, &model)?;
    let val_chunks = chunks_for_model(&splits.val, &model)?;
    let outcome = train(model, &train_chunks, &val_chunks, &cfg.train, None)?;
    Ok((outcome.model, outcome.log))
}

pub fn run_variant(variant: Variant, splits: &Splits, cfg: &AblationConfig) -> Result<AblationRow> {
    let started = Instant::now();
    let (model, log) = train_variant(variant, splits, cfg)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let evals = spot_videos(&model, &splits.test, cfg.t_nms_s)?;
    Ok(AblationRow {
        name: variant.name(),
        variant,
        params: model.param_count(),
        best_epoch: log.best_epoch,
        epochs: log.epochs.len(),
        report: average_map(&evals, &splits.classes, &default_deltas())?,
        train_seconds,
    })
}

/// Runs every variant, in parallel across variants.
pub fn run_ablation(splits: &Splits, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    cfg.variants.par_iter().map(|&v| run_variant(v, splits, cfg)).collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} {:>10} {:>11} {:>7} {:>8} {:>7}",
        "pooling", "params", "Avg-mAP", "shown", "unshown", "epochs"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>10} {:>11.2} {:>7.2} {:>8.2} {:>7}",
            r.name,
            r.params.total,
            100.0 * r.report.average_map,
            100.0 * r.report.visible.average_map,
            100.0 * r.report.unshown.average_map,
            r.epochs
        );
    }
    out
}
