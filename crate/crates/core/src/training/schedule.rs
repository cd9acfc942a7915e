use super::TrainConfig;

/// A validation loss counts as an improvement only if it beats the best so
/// far by more than this.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    /// Rate for the next epoch.
    pub lr: f64,
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Divides the learning rate by `decay_factor` once the validation loss has
/// not improved for `patience` epochs, counting from the last improvement or
/// decay, and signals a stop once the rate falls below `stop_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    initial_lr: f64,
    decay_factor: f64,
    patience: usize,
    stop_lr: f64,
    decays: i32,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            initial_lr: cfg.initial_lr,
            decay_factor: cfg.decay_factor,
            patience: cfg.patience,
            stop_lr: cfg.stop_lr,
            decays: 0,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr / self.decay_factor.powi(self.decays)
    }

    pub fn decays(&self) -> i32 {
        self.decays
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        let epoch = self.epochs;
        self.epochs += 1;
        let improved = self.best_epoch.is_none() || val_loss < self.best - IMPROVEMENT_TOLERANCE;
        let mut decayed = false;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.decays += 1;
                self.stale = 0;
                decayed = true;
            }
        }
        let lr = self.lr();
        ScheduleStep { lr, improved, decayed, stop: lr < self.stop_lr }
    }
}

/// Replays a validation history from the initial rate and returns the rate
/// for the next epoch together with the stop flag.
pub fn lr_schedule_step(history: &[f64], cfg: &TrainConfig) -> (f64, bool) {
    let mut scheduler = PlateauScheduler::new(cfg);
    let mut stop = false;
    for &loss in history {
        stop = scheduler.observe(loss).stop;
    }
    (scheduler.lr(), stop)
}
