//! Task sequences for class-incremental learning.
//!
//! A [`TaskSequence`] is an ordered list of class-disjoint tasks. Labels are
//! remapped so task `t` (1-based) owns the contiguous class block
//! `[(t-1)·K/n, t·K/n)`, which lets the classifier's output index encode task
//! membership directly.

mod idx;
mod manifest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use manifest::{DatasetSource, SequenceManifest, TaskBlock};
pub use synthetic::{gen_crosstask, CrossTaskConfig};

use crate::{Error, Result, Tensor};

/// Stream tags for deriving independent random streams from one seed.
pub(crate) mod stream {
    pub const CLASS_ORDER: u64 = 1;
    pub const VAL_SPLIT: u64 = 2;
    pub const SYNTH_TRAIN: u64 = 3;
    pub const SYNTH_TEST: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    /// Unique within a dataset (train and test ids do not collide).
    pub id: u64,
    pub input: Vec<f64>,
    pub label: usize,
}

/// Stacks example inputs into a `(B, dim)` batch.
pub fn batch_inputs<'a, I>(examples: I) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let rows: Vec<&[f64]> = examples.into_iter().map(|e| e.input.as_slice()).collect();
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based task number.
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<TaskSpec>,
    /// `class_order[i]` is the original class that became label `i`.
    class_order: Vec<usize>,
    seed: u64,
}

impl TaskSequence {
    /// Validates disjointness and label membership.
    pub fn new(tasks: Vec<TaskSpec>, class_order: Vec<usize>, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("a task sequence needs at least one task".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.index != i + 1 {
                return Err(Error::Data(format!(
                    "task at position {i} has index {}",
                    task.index
                )));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!("class {c} appears in more than one task")));
                }
            }
            let own: BTreeSet<_> = task.classes.iter().copied().collect();
            for e in task.train.iter().chain(&task.val).chain(&task.test) {
                if !own.contains(&e.label) {
                    return Err(Error::Data(format!(
                        "example {} with label {} does not belong to task {}",
                        e.id, e.label, task.index
                    )));
                }
            }
        }
        let dims: BTreeSet<usize> = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test))
            .map(|e| e.input.len())
            .collect();
        if dims.len() > 1 {
            return Err(Error::Data(format!("inconsistent input widths {dims:?}")));
        }
        Ok(Self {
            tasks,
            class_order,
            seed,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// Task `t`, 1-based.
    pub fn task(&self, t: usize) -> &TaskSpec {
        &self.tasks[t - 1]
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .map(|e| e.input.len())
            .next()
            .unwrap_or(0)
    }

    /// Task number of every class, indexed by (remapped) label.
    pub fn class_to_task(&self) -> Vec<usize> {
        let mut map = vec![0; self.n_classes()];
        for task in &self.tasks {
            for &c in &task.classes {
                map[c] = task.index;
            }
        }
        map
    }

    /// C_Σ^k: classes of tasks `1..=k`.
    pub fn cumulative_classes(&self, k: usize) -> Vec<usize> {
        self.tasks[..k]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    /// Training portion of D_Σ^k.
    pub fn cumulative_train(&self, k: usize) -> impl Iterator<Item = &LabeledExample> {
        self.tasks[..k].iter().flat_map(|t| t.train.iter())
    }

    pub fn cumulative_val(&self, k: usize) -> impl Iterator<Item = &LabeledExample> {
        self.tasks[..k].iter().flat_map(|t| t.val.iter())
    }

    pub fn cumulative_test(&self, k: usize) -> impl Iterator<Item = &LabeledExample> {
        self.tasks[..k].iter().flat_map(|t| t.test.iter())
    }
}

/// How original classes are ordered before being cut into task blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    Identity,
    Explicit(Vec<usize>),
    Seeded(u64),
}

impl ClassOrder {
    pub fn resolve(&self, n_classes: usize) -> Result<Vec<usize>> {
        match self {
            ClassOrder::Identity => Ok((0..n_classes).collect()),
            ClassOrder::Seeded(seed) => {
                let mut order: Vec<usize> = (0..n_classes).collect();
                order.shuffle(&mut rng_for(*seed, stream::CLASS_ORDER));
                Ok(order)
            }
            ClassOrder::Explicit(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..n_classes).collect::<Vec<_>>() {
                    return Err(Error::Config(format!(
                        "class order must be a permutation of 0..{n_classes}"
                    )));
                }
                Ok(order.clone())
            }
        }
    }
}

/// Cuts `train`/`test` into `n_tasks` class blocks following `order`, remaps
/// labels to block order and carves a stratified validation split out of
/// each task's training data.
pub fn build_task_sequence(
    train: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    n_tasks: usize,
    order: &ClassOrder,
    val_fraction: f64,
    seed: u64,
) -> Result<TaskSequence> {
    if n_tasks == 0 {
        return Err(Error::Config("n_tasks must be positive".into()));
    }
    let n_classes = train
        .iter()
        .chain(&test)
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(0);
    if n_classes == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if n_classes % n_tasks != 0 {
        return Err(Error::Config(format!(
            "{n_classes} classes cannot be split evenly into {n_tasks} tasks"
        )));
    }
    let mut train_counts = vec![0usize; n_classes];
    for e in &train {
        train_counts[e.label] += 1;
    }
    if let Some(c) = train_counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no training examples")));
    }

    let class_order = order.resolve(n_classes)?;
    let mut remap = vec![0; n_classes];
    for (new, &old) in class_order.iter().enumerate() {
        remap[old] = new;
    }
    let per_task = n_classes / n_tasks;
    let relabel = |mut e: LabeledExample| {
        e.label = remap[e.label];
        e
    };

    let mut train_by_task: Vec<Vec<LabeledExample>> = vec![Vec::new(); n_tasks];
    for e in train.into_iter().map(relabel) {
        train_by_task[e.label / per_task].push(e);
    }
    let mut test_by_task: Vec<Vec<LabeledExample>> = vec![Vec::new(); n_tasks];
    for e in test.into_iter().map(relabel) {
        test_by_task[e.label / per_task].push(e);
    }

    let mut tasks = Vec::with_capacity(n_tasks);
    for (i, (task_train, task_test)) in train_by_task.into_iter().zip(test_by_task).enumerate() {
        let (train, val) = split_validation(task_train, val_fraction, seed.wrapping_add(i as u64))?;
        tasks.push(TaskSpec {
            index: i + 1,
            classes: (i * per_task..(i + 1) * per_task).collect(),
            train,
            val,
            test: task_test,
        });
    }
    TaskSequence::new(tasks, class_order, seed)
}

/// Stratified split: `ceil(fraction · n_c)` examples of every class go to
/// validation. Both outputs keep the input's relative order.
pub fn split_validation(
    train: Vec<LabeledExample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in train.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let mut rng = rng_for(seed, stream::VAL_SPLIT);
    let mut to_val = vec![false; train.len()];
    for (class, mut members) in by_class {
        let n = members.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "class {class} has {n} example(s); stratified split needs at least 2"
            )));
        }
        let n_val = val_count(n, fraction);
        if n_val >= n {
            return Err(Error::Data(format!(
                "validation fraction {fraction} leaves class {class} without training data"
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..n_val] {
            to_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = train
        .into_iter()
        .zip(to_val)
        .partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(e, _)| e).collect(),
        val.into_iter().map(|(e, _)| e).collect(),
    ))
}

/// `ceil(fraction · n)`, robust to products that land a hair above an integer.
pub fn val_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}
