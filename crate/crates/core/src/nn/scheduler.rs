//! Patience-based learning-rate schedule with best-model retention.
//!
//! Each epoch reports the current-task validation loss. An improvement stores
//! a copy of the model and resets the counter. After `patience` epochs without
//! improvement the learning rate is divided by `factor`; if the reduced rate
//! would drop below `min_lr` the session stops and the best copy is restored.

use serde::{Deserialize, Serialize};

use super::{Model, ParamState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 3.0,
            min_lr: 1e-4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.factor > 1.0) {
            return Err(Error::Config(format!(
                "scheduler factor must exceed 1, got {}",
                self.factor
            )));
        }
        if !(self.min_lr > 0.0) {
            return Err(Error::Config(format!(
                "min_lr must be positive, got {}",
                self.min_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerAction {
    Continue,
    ReduceLr,
    Stop,
}

#[derive(Debug, Clone)]
pub struct PatienceScheduler {
    config: SchedulerConfig,
    lr: f64,
    best_val_loss: f64,
    epochs_since_improvement: usize,
    best: Option<ParamState>,
}

impl PatienceScheduler {
    pub fn new(config: SchedulerConfig, initial_lr: f64) -> Self {
        Self {
            config,
            lr: initial_lr,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            best: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best_val_loss
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    /// Call once per epoch. On `Stop` the best snapshot is already restored.
    pub fn step(&mut self, val_loss: f64, model: &mut Model) -> SchedulerAction {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            self.best = Some(model.state());
            return SchedulerAction::Continue;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement < self.config.patience {
            return SchedulerAction::Continue;
        }
        self.epochs_since_improvement = 0;
        let next = self.lr / self.config.factor;
        if next < self.config.min_lr {
            self.restore_best(model);
            return SchedulerAction::Stop;
        }
        self.lr = next;
        SchedulerAction::ReduceLr
    }

    /// Loads the lowest-validation-loss parameters into `model` (no-op if no
    /// epoch was recorded).
    pub fn restore_best(&self, model: &mut Model) {
        if let Some(best) = &self.best {
            model
                .load_state(best)
                .expect("best snapshot taken from the same model");
        }
    }
}
