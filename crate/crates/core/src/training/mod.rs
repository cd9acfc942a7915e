//! Mini-batch training with Adam and a validation-plateau learning-rate
//! schedule.

mod schedule;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_training_chunks, TrainingChunk, Video};
use crate::error::{Error, Result};
use crate::model::{bce_loss, ModelParams, SpottingModel};
use crate::numerics::{adam_step, AdamHyper, AdamState};

pub use schedule::{lr_schedule_step, PlateauScheduler, ScheduleStep, IMPROVEMENT_TOLERANCE};

/// Chunks per gradient-summation block. Blocks are summed in parallel and
/// then combined in index order, so the result does not depend on the
/// number of worker threads.
const BLOCK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub stop_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_factor: 10.0,
            patience: 10,
            stop_lr: 1e-8,
            batch_size: 256,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 1.0) {
            return Err(Error::invalid(format!("decay_factor must exceed 1, got {}", self.decay_factor)));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::invalid("patience and batch_size must be at least 1"));
        }
        if !(self.initial_lr >= 0.0 && self.stop_lr >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        // a zero rate freezes the model and is allowed with a zero stop rate
        if !(self.stop_lr < self.initial_lr || self.initial_lr == 0.0) {
            return Err(Error::invalid(format!(
                "stop_lr {} must be below initial_lr {}",
                self.stop_lr, self.initial_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrBelowStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl TrainLog {
    /// One JSON record per epoch. Without wall times the output depends
    /// only on the inputs and the seed.
    pub fn to_jsonl(&self, with_wall_time: bool) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            let mut value = serde_json::to_value(record).expect("plain record");
            if !with_wall_time {
                value.as_object_mut().expect("record object").remove("wall_time_s");
            }
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl(true).as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: SpottingModel,
    pub log: TrainLog,
}

/// Cuts every video into training chunks sized to the model window.
pub fn chunks_for_model(videos: &[Video], model: &SpottingModel) -> Result<Vec<TrainingChunk>> {
    let config = model.config();
    let seconds = config.window_frames() as f64 / config.window.frame_rate;
    let mut chunks = Vec::new();
    for v in videos {
        if v.features.dim() != config.input_dim {
            return Err(Error::shape("training video", config.input_dim, v.features.dim()));
        }
        chunks.extend(make_training_chunks(&v.features, &v.labels, seconds, config.action_classes, config.background)?);
    }
    Ok(chunks)
}

/// Mean BCE of the model over `chunks` with dropout off.
pub fn evaluate_loss(model: &SpottingModel, chunks: &[TrainingChunk]) -> Result<f64> {
    let predictions = chunks.par_iter().map(|c| model.predict(&c.frames)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = chunks.iter().map(|c| c.target.clone()).collect();
    bce_loss(&predictions, &targets)
}

/// Dropout stream for one chunk visit, fixed by seed, epoch and position.
fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(position as u64).to_le_bytes());
    key[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(key)
}

/// Summed loss and summed gradient over one batch.
fn batch_gradient(
    model: &SpottingModel,
    chunks: &[TrainingChunk],
    batch: &[usize],
    seed: u64,
    epoch: usize,
    offset: usize,
) -> Result<(f64, ModelParams)> {
    let classes = model.config().class_count() as f64;
    let blocks = batch
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(b, block)| {
            let mut grads = model.params().zeros_like();
            let mut loss = 0.0;
            for (i, &idx) in block.iter().enumerate() {
                let chunk = &chunks[idx];
                let mut rng = dropout_rng(seed, epoch, offset + b * BLOCK + i);
                let (pred, cache) = model.forward(&chunk.frames, Some(&mut rng))?;
                loss += bce_loss(&[pred], std::slice::from_ref(&chunk.target))? * classes;
                grads.accumulate(&model.backward(&cache, &chunk.target)?)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params().zeros_like();
    let mut loss = 0.0;
    for (l, g) in &blocks {
        loss += l;
        total.accumulate(g)?;
    }
    Ok((loss, total))
}

/// Trains `model` on `train`, tracking the validation loss after every
/// epoch. Returns the parameters of the best validation epoch.
pub fn train(
    mut model: SpottingModel,
    train: &[TrainingChunk],
    val: &[TrainingChunk],
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation chunks"));
    }
    let classes = model.config().class_count() as f64;
    let mut scheduler = PlateauScheduler::new(cfg);
    let mut adam = AdamState::new(model.params().len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = scheduler.lr();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let offset = batch_index * cfg.batch_size;
            let diagnostics = |model: &SpottingModel| Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
                param_norm: model.params().norm(),
            };
            let (loss, mut grads) = match batch_gradient(&model, train, batch, cfg.seed, epoch, offset) {
                Err(Error::NonFinite(_)) => return Err(diagnostics(&model)),
                other => other?,
            };
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            let mean_loss = loss / (n * classes);
            let grad_flat = grads.flatten();
            if !mean_loss.is_finite() || grad_flat.iter().any(|g| !g.is_finite()) {
                return Err(diagnostics(&model));
            }
            epoch_loss += loss;
            let mut flat = model.params().flatten();
            adam_step(&mut flat, &grad_flat, &mut adam, &AdamHyper { lr, ..AdamHyper::default() })?;
            model.params_mut().assign_flat(&flat)?;
        }
        let train_loss = epoch_loss / (train.len() as f64 * classes);
        let val_loss = evaluate_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, param_norm: model.params().norm() });
        }
        let step = scheduler.observe(val_loss);
        if step.improved {
            best = model.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved: step.improved,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = on_epoch.as_deref_mut() {
            f(&record);
        }
        epochs.push(record);
        if step.stop {
            stop = StopReason::LrBelowStop;
            break;
        }
    }
    let log = TrainLog {
        best_epoch: scheduler.best_epoch().unwrap_or(0),
        best_val_loss: scheduler.best(),
        epochs,
        stop,
    };
    Ok(TrainOutcome { model: best, log })
}
