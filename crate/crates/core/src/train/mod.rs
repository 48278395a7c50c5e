//! The two-step incremental procedure.
//!
//! For each task `t`: grow the head, optionally pick a learning rate, train
//! extractor and head on `D^t ∪ M` with the configured loss, refresh the
//! memory, then fine-tune the head alone on the memory with plain CE while
//! the extractor stays frozen. The resulting parameters are snapshot `θ^t`
//! and its test logits go into the prediction log.

mod loss;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{loss_and_grad, loss_ce, loss_ce_it, LossKind, Reduction};

use crate::data::{batch_inputs, rng_for, stream, LabeledExample, TaskSequence, TaskSpec};
use crate::metrics::{PredictionLog, PredictionRecord};
use crate::nn::{sgd_step, Model, OptimizerConfig, PatienceScheduler, SchedulerAction, SchedulerConfig};
use crate::replay::{training_pool, MemoryBuffer, MemoryMode, SelectionStrategy};
use crate::{Error, Result};

/// Hard cap on learning-rate probe length.
pub const MAX_PROBE_EPOCHS: usize = 20;

/// Validation data watched by the patience schedule of the fine-tuning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneValidation {
    /// Validation splits of every task seen so far.
    #[default]
    Cumulative,
    /// Validation split of the newest task only.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSearchConfig {
    pub first_task_grid: Vec<f64>,
    pub later_task_grid: Vec<f64>,
    pub probe_epochs: usize,
}

impl Default for LrSearchConfig {
    fn default() -> Self {
        Self {
            first_task_grid: vec![0.5, 0.1, 0.05],
            later_task_grid: vec![0.1, 0.05, 0.01, 0.005, 0.001],
            probe_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub reduction: Reduction,
    pub batch_size: usize,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub lr_search: Option<LrSearchConfig>,
    pub finetune_validation: FinetuneValidation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::Mean,
            batch_size: 32,
            epochs_step1: 100,
            epochs_step2: 100,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            lr_search: None,
            finetune_validation: FinetuneValidation::Cumulative,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        if let Some(search) = &self.lr_search {
            if search.probe_epochs == 0 || search.probe_epochs > MAX_PROBE_EPOCHS {
                return Err(Error::Config(format!(
                    "probe_epochs must lie in 1..={MAX_PROBE_EPOCHS}, got {}",
                    search.probe_epochs
                )));
            }
            for grid in [&search.first_task_grid, &search.later_task_grid] {
                if grid.is_empty() || grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
                    return Err(Error::Config(format!(
                        "learning-rate grid must be non-empty and positive, got {grid:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Widths of the extractor's hidden layers; the last is the feature size.
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub memory: MemoryMode,
    #[serde(default = "default_selection")]
    pub selection: SelectionStrategy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_selection() -> SelectionStrategy {
    SelectionStrategy::Herding
}

/// Summary of one training session (step 1, step 2 or a probe).
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStats {
    pub epochs_run: usize,
    pub final_lr: f64,
    pub best_val_loss: f64,
    /// Mean training loss of the last epoch (`NaN` when no epoch ran).
    pub last_train_loss: f64,
}

/// One session: SGD over shuffled mini-batches with patience scheduling.
/// Momentum starts from zero; the best-validation parameters are restored at
/// the end. An empty `val` falls back to the epoch's mean training loss.
fn run_session<R: Rng>(
    model: &mut Model,
    pool: &[LabeledExample],
    val: &[&LabeledExample],
    loss: LossKind,
    epochs: usize,
    learning_rate: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SessionStats> {
    let mut stats = SessionStats {
        epochs_run: 0,
        final_lr: learning_rate,
        best_val_loss: f64::INFINITY,
        last_train_loss: f64::NAN,
    };
    if epochs == 0 || pool.is_empty() {
        return Ok(stats);
    }
    model.reset_momentum();
    let n_active = model.n_classes();
    let c2t = model.class_to_task().to_vec();
    let n_tasks = model.n_tasks();
    let val_inputs = if val.is_empty() { None } else { Some(batch_inputs(val.iter().copied())?) };
    let val_labels: Vec<usize> = val.iter().map(|e| e.label).collect();

    let mut scheduler = PatienceScheduler::new(config.scheduler, learning_rate);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let opt = config.optimizer.with_learning_rate(scheduler.lr());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let inputs = batch_inputs(chunk.iter().map(|&i| &pool[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| pool[i].label).collect();
            let logits = model.forward(&inputs, n_active)?;
            let (value, grad) =
                loss_and_grad(loss, &logits, &labels, &c2t, n_tasks, config.reduction)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "{} loss diverged ({value}) at epoch {}, batch {b}, lr {}",
                    loss.label(),
                    epoch + 1,
                    scheduler.lr()
                )));
            }
            total += value * chunk.len() as f64;
            model.backward(&grad)?;
            sgd_step(model, &opt)?;
        }
        stats.epochs_run = epoch + 1;
        stats.last_train_loss = total / pool.len() as f64;
        let monitored = match &val_inputs {
            Some(x) => {
                let logits = model.logits(x, n_active)?;
                let (v, _) =
                    loss_and_grad(loss, &logits, &val_labels, &c2t, n_tasks, Reduction::Mean)?;
                v
            }
            None => stats.last_train_loss,
        };
        if !monitored.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss diverged ({monitored}) at epoch {}, lr {}",
                epoch + 1,
                scheduler.lr()
            )));
        }
        if scheduler.step(monitored, model) == SchedulerAction::Stop {
            break;
        }
    }
    scheduler.restore_best(model);
    stats.final_lr = scheduler.lr();
    stats.best_val_loss = scheduler.best_val_loss();
    Ok(stats)
}

/// Step 1: trains extractor and head on `pool` with `loss`, watching the
/// same loss on `val`.
pub fn train_task<R: Rng>(
    model: &mut Model,
    loss: LossKind,
    pool: &[LabeledExample],
    val: &[&LabeledExample],
    learning_rate: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SessionStats> {
    model.set_trainable(true, true);
    run_session(model, pool, val, loss, config.epochs_step1, learning_rate, config, rng)
}

/// Step 2: head-only CE training on the memory with the extractor frozen.
pub fn balanced_finetune<R: Rng>(
    model: &mut Model,
    buffer: &MemoryBuffer,
    val: &[&LabeledExample],
    learning_rate: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SessionStats> {
    if buffer.is_empty() {
        return Err(Error::Data("balanced fine-tuning needs a non-empty memory".into()));
    }
    let pool: Vec<LabeledExample> = buffer.examples().cloned().collect();
    model.set_trainable(false, true);
    let out = run_session(model, &pool, val, LossKind::Ce, config.epochs_step2, learning_rate, config, rng);
    model.set_trainable(true, true);
    out
}

/// Fraction of `examples` whose full-head argmax equals the label.
pub fn accuracy(model: &Model, examples: &[&LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let logits = model.logits(&batch_inputs(examples.iter().copied())?, model.n_classes())?;
    let hits = examples
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            let row = logits.row(*i);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == e.label
        })
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Probes each rate with a short CE fine-tuning run on `task` alone (on a
/// copy of the model and RNG) and returns the rate with the best validation
/// accuracy; ties go to the larger rate. Diverged probes are skipped.
pub fn lr_search<R: Rng + Clone>(
    model: &Model,
    task: &TaskSpec,
    grid: &[f64],
    probe_epochs: usize,
    config: &TrainConfig,
    rng: &R,
) -> Result<f64> {
    match grid {
        [] => return Err(Error::Config("empty learning-rate grid".into())),
        [only] => return Ok(*only),
        _ => {}
    }
    let epochs = probe_epochs.min(MAX_PROBE_EPOCHS);
    let val: Vec<&LabeledExample> = if task.val.is_empty() {
        task.train.iter().collect()
    } else {
        task.val.iter().collect()
    };
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let mut probe = model.clone();
        let mut probe_rng = rng.clone();
        let mut probe_config = config.clone();
        probe_config.epochs_step1 = epochs;
        if train_task(&mut probe, LossKind::Ce, &task.train, &val, lr, &probe_config, &mut probe_rng).is_err() {
            continue;
        }
        let acc = accuracy(&probe, &val)?;
        let better = match best {
            None => true,
            Some((best_acc, best_lr)) => acc > best_acc || (acc == best_acc && lr > best_lr),
        };
        if better {
            best = Some((acc, lr));
        }
    }
    best.map(|(_, lr)| lr)
        .ok_or_else(|| Error::Numerical(format!("every learning-rate probe diverged: {grid:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub task: usize,
    pub learning_rate: f64,
    pub step1: SessionStats,
    pub step2: SessionStats,
    pub memory_size: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Final model; `snapshots()` holds `θ^1..θ^n`.
    pub model: Model,
    pub log: PredictionLog,
    pub buffer: MemoryBuffer,
    pub tasks: Vec<TaskStats>,
}

/// Runs the whole sequence and logs test logits of `test(D_Σ^t)` under every
/// snapshot `θ^t`.
pub fn run_sequence(seq: &TaskSequence, config: &ExperimentConfig) -> Result<RunOutput> {
    let train = &config.train;
    train.validate()?;
    if config.hidden.is_empty() || config.hidden.contains(&0) {
        return Err(Error::Config(format!(
            "hidden widths must be non-empty and positive, got {:?}",
            config.hidden
        )));
    }
    let mut init_rng = rng_for(config.seed, stream::MODEL_INIT);
    let mut train_rng: ChaCha8Rng = rng_for(config.seed, stream::SHUFFLE);
    let mut model = Model::new(seq.input_dim(), &config.hidden, &mut init_rng)?;
    let mut buffer = MemoryBuffer::new(config.memory, config.selection, config.seed)?;
    let mut log = PredictionLog::new(seq.class_to_task())?;
    let mut tasks = Vec::with_capacity(seq.n_tasks());

    for task in seq.tasks() {
        let t = task.index;
        let first = model.n_classes();
        model.add_task(task.classes.len(), &mut init_rng)?;
        let expected: Vec<usize> = (first..first + task.classes.len()).collect();
        if task.classes != expected {
            return Err(Error::Data(format!(
                "task {t} classes {:?} do not match head outputs {expected:?}",
                task.classes
            )));
        }

        let learning_rate = match &train.lr_search {
            Some(search) => {
                let grid = if t == 1 { &search.first_task_grid } else { &search.later_task_grid };
                lr_search(&model, task, grid, search.probe_epochs, train, &train_rng)?
            }
            None => train.optimizer.learning_rate,
        };

        let pool = training_pool(&buffer, task);
        let current_val: Vec<&LabeledExample> = task.val.iter().collect();
        let step1 = train_task(&mut model, config.loss, &pool, &current_val, learning_rate, train, &mut train_rng)?;

        buffer.update(task, &model)?;

        let ft_val: Vec<&LabeledExample> = match train.finetune_validation {
            FinetuneValidation::Cumulative => seq.cumulative_val(t).collect(),
            FinetuneValidation::Current => current_val,
        };
        let step2 =
            balanced_finetune(&mut model, &buffer, &ft_val, learning_rate, train, &mut train_rng)?;
        model.store_snapshot(t);

        let test: Vec<&LabeledExample> = seq.cumulative_test(t).collect();
        if !test.is_empty() {
            let logits = model.logits(&batch_inputs(test.iter().copied())?, model.n_classes())?;
            for (i, e) in test.iter().enumerate() {
                log.push(PredictionRecord {
                    snapshot: t,
                    example_id: e.id,
                    label: e.label,
                    logits: logits.row(i).to_vec(),
                })?;
            }
        }
        tasks.push(TaskStats {
            task: t,
            learning_rate,
            step1,
            step2,
            memory_size: buffer.len(),
        });
    }
    Ok(RunOutput {
        model,
        log,
        buffer,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_crosstask;
    use crate::metrics::MetricsTable;

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs_step1: 30,
            epochs_step2: 30,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn toy_model(seq: &TaskSequence, seed: u64) -> Model {
        let mut rng = rng_for(seed, stream::MODEL_INIT);
        Model::new(seq.input_dim(), &[8], &mut rng).unwrap()
    }

    #[test]
    fn noiseless_task_is_fit_within_fifty_epochs() {
        let seq = gen_crosstask(20, 0.0, 0, 1).unwrap();
        let mut model = toy_model(&seq, 1);
        let mut rng = rng_for(1, stream::SHUFFLE);
        model.add_task(2, &mut rng).unwrap();
        let task = seq.task(1);
        let cfg = TrainConfig {
            epochs_step1: 50,
            ..quick()
        };
        train_task(&mut model, LossKind::Ce, &task.train, &[], 0.1, &cfg, &mut rng).unwrap();
        let train: Vec<&LabeledExample> = task.train.iter().collect();
        assert_eq!(accuracy(&model, &train).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let seq = gen_crosstask(10, 0.3, 1, 2).unwrap();
        let mut model = toy_model(&seq, 2);
        let mut rng = rng_for(2, stream::SHUFFLE);
        model.add_task(2, &mut rng).unwrap();
        let before = model.state();
        let cfg = TrainConfig {
            epochs_step1: 0,
            ..quick()
        };
        train_task(&mut model, LossKind::Ce, &seq.task(1).train, &[], 0.1, &cfg, &mut rng).unwrap();
        assert_eq!(model.state(), before);
    }

    #[test]
    fn divergence_is_reported() {
        let seq = gen_crosstask(10, 0.3, 1, 2).unwrap();
        let mut model = toy_model(&seq, 2);
        let mut rng = rng_for(2, stream::SHUFFLE);
        model.add_task(2, &mut rng).unwrap();
        let mut cfg = quick();
        cfg.optimizer.clip_threshold = 1e300;
        let err = train_task(&mut model, LossKind::Ce, &seq.task(1).train, &[], 1e200, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    fn exp(loss: LossKind, memory: MemoryMode, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            hidden: vec![8],
            memory,
            selection: SelectionStrategy::Herding,
            loss,
            train: quick(),
            seed,
        }
    }

    #[test]
    fn run_is_deterministic() {
        let seq = gen_crosstask(30, 0.3, 1, 5).unwrap();
        let cfg = exp(LossKind::CeIt, MemoryMode::Growing { per_class: 5 }, 7);
        let a = run_sequence(&seq, &cfg).unwrap();
        let b = run_sequence(&seq, &cfg).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.state(), b.model.state());
        let c = run_sequence(&seq, &exp(LossKind::CeIt, MemoryMode::Growing { per_class: 5 }, 8))
            .unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn snapshots_and_log_cover_every_task() {
        let seq = gen_crosstask(20, 0.3, 0, 6).unwrap();
        let out = run_sequence(&seq, &exp(LossKind::Ce, MemoryMode::Max, 1)).unwrap();
        assert_eq!(out.model.snapshots().len(), 2);
        assert_eq!(out.model.snapshot(2), Some(&out.model.state()));
        assert_eq!(out.log.len(), 40 + 80);
        assert_eq!(out.buffer.len(), out.tasks[1].memory_size);
        let table = MetricsTable::compute(&out.log).unwrap();
        assert_eq!(table.summaries.len(), 2);
    }

    #[test]
    fn finetune_keeps_extractor_bit_identical() {
        let seq = gen_crosstask(30, 0.4, 2, 3).unwrap();
        let mut rng = rng_for(3, stream::SHUFFLE);
        let mut model = toy_model(&seq, 3);
        let mut buffer = MemoryBuffer::new(MemoryMode::Growing { per_class: 10 }, SelectionStrategy::Herding, 3).unwrap();
        let cfg = quick();
        for task in seq.tasks() {
            model.add_task(2, &mut rng).unwrap();
            let pool = training_pool(&buffer, task);
            train_task(&mut model, LossKind::Ce, &pool, &[], 0.1, &cfg, &mut rng).unwrap();
            buffer.update(task, &model).unwrap();
        }
        let probes = batch_inputs(seq.cumulative_test(2)).unwrap();
        let before = model.features(&probes).unwrap();
        let extractor_before: Vec<_> = model.extractor().to_vec();
        let head_before = model.classifier().weight.value.clone();
        let val: Vec<&LabeledExample> = seq.cumulative_val(2).collect();
        balanced_finetune(&mut model, &buffer, &val, 0.1, &cfg, &mut rng).unwrap();
        assert_eq!(model.features(&probes).unwrap(), before);
        for (a, b) in model.extractor().iter().zip(&extractor_before) {
            assert_eq!(a.weight.value, b.weight.value);
            assert_eq!(a.bias.value, b.bias.value);
        }
        assert_ne!(model.classifier().weight.value, head_before);
    }

    #[test]
    fn single_class_buffer_predicts_that_class() {
        let seq = gen_crosstask(20, 0.3, 0, 4).unwrap();
        let mut rng = rng_for(4, stream::SHUFFLE);
        let mut model = toy_model(&seq, 4);
        model.add_task(2, &mut rng).unwrap();
        let mut only_zero = seq.task(1).clone();
        only_zero.train.retain(|e| e.label == 0);
        only_zero.classes = vec![0];
        let mut buffer = MemoryBuffer::new(MemoryMode::Growing { per_class: 5 }, SelectionStrategy::Herding, 4).unwrap();
        buffer.update(&only_zero, &model).unwrap();
        balanced_finetune(&mut model, &buffer, &[], 0.1, &quick(), &mut rng).unwrap();
        let test: Vec<&LabeledExample> = seq.task(1).test.iter().filter(|e| e.label == 0).collect();
        assert_eq!(accuracy(&model, &test).unwrap(), 1.0);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let seq = gen_crosstask(10, 0.3, 0, 4).unwrap();
        let mut model = toy_model(&seq, 4);
        let mut rng = rng_for(4, stream::SHUFFLE);
        model.add_task(2, &mut rng).unwrap();
        let buffer = MemoryBuffer::new(MemoryMode::Max, SelectionStrategy::Herding, 4).unwrap();
        assert!(balanced_finetune(&mut model, &buffer, &[], 0.1, &quick(), &mut rng).is_err());
    }

    #[test]
    fn lr_search_prefers_rate_that_fits() {
        let seq = gen_crosstask(30, 0.3, 1, 9).unwrap();
        let mut model = toy_model(&seq, 9);
        let rng = rng_for(9, stream::SHUFFLE);
        model.add_task(2, &mut rng.clone()).unwrap();
        let cfg = quick();
        let task = seq.task(1);
        assert_eq!(lr_search(&model, task, &[0.5, 1e-6], 10, &cfg, &rng).unwrap(), 0.5);
        assert_eq!(lr_search(&model, task, &[1e-6, 0.5], 10, &cfg, &rng).unwrap(), 0.5);
        assert_eq!(lr_search(&model, task, &[0.3], 10, &cfg, &rng).unwrap(), 0.3);
        assert!(lr_search(&model, task, &[], 10, &cfg, &rng).is_err());
    }
}
