//! Prediction logs: one record per (snapshot, test example) with the full
//! logit vector over the classes seen at that snapshot.
//!
//! Text format, one record per line:
//!
//! ```text
//! cil-prediction-log,1
//! class_to_task,<task of class 0>,<task of class 1>,...
//! <snapshot>,<example_id>,<label>,<task of label>,<logit 0>,<logit 1>,...
//! ```
//!
//! Snapshots and tasks are 1-based. Lines starting with `#` and blank lines
//! are ignored. Floats use the shortest representation that parses back to
//! the same value, so a written log re-reads bit-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

const HEADER: &str = "cil-prediction-log,1";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub snapshot: usize,
    pub example_id: u64,
    pub label: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    class_to_task: Vec<usize>,
    /// Records grouped by snapshot; within a snapshot keyed by example id.
    by_snapshot: BTreeMap<usize, BTreeMap<u64, PredictionRecord>>,
    /// Label of every example id seen in any snapshot.
    labels: BTreeMap<u64, usize>,
}

impl PredictionLog {
    /// `class_to_task[c]` is the 1-based task of class `c`. It must be
    /// non-decreasing (so C_Σ^t is a prefix of the class indices and logit
    /// column `c` is class `c`) and every task in `1..=max` must own a class.
    pub fn new(class_to_task: Vec<usize>) -> Result<Self> {
        let tasks: BTreeSet<usize> = class_to_task.iter().copied().collect();
        let n = tasks.iter().next_back().copied().unwrap_or(0);
        let sorted = class_to_task.windows(2).all(|w| w[0] <= w[1]);
        if tasks.contains(&0) || tasks.len() != n || !sorted {
            return Err(Error::Data(format!(
                "class_to_task must be non-decreasing and cover tasks 1..={n}, got {class_to_task:?}"
            )));
        }
        Ok(Self {
            class_to_task,
            by_snapshot: BTreeMap::new(),
            labels: BTreeMap::new(),
        })
    }

    pub fn class_to_task(&self) -> &[usize] {
        &self.class_to_task
    }

    pub fn n_tasks(&self) -> usize {
        self.class_to_task.iter().copied().max().unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.class_to_task.len()
    }

    /// |C_Σ^t|.
    pub fn n_classes_at(&self, t: usize) -> usize {
        self.class_to_task.iter().filter(|&&k| k <= t).count()
    }

    pub fn task_of(&self, class: usize) -> usize {
        self.class_to_task[class]
    }

    /// Snapshots with at least one record, ascending.
    pub fn snapshots(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_snapshot.keys().copied()
    }

    pub fn last_snapshot(&self) -> Option<usize> {
        self.by_snapshot.keys().next_back().copied()
    }

    pub fn len(&self) -> usize {
        self.by_snapshot.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.by_snapshot.values().flat_map(BTreeMap::values)
    }

    pub fn push(&mut self, record: PredictionRecord) -> Result<()> {
        let t = record.snapshot;
        if t == 0 || t > self.n_tasks() {
            return Err(Error::Data(format!("snapshot {t} outside 1..={}", self.n_tasks())));
        }
        if record.label >= self.n_classes() {
            return Err(Error::Data(format!(
                "label {} of example {} is not a known class",
                record.label, record.example_id
            )));
        }
        if self.task_of(record.label) > t {
            return Err(Error::Data(format!(
                "example {} belongs to task {} but is logged at snapshot {t}",
                record.example_id,
                self.task_of(record.label)
            )));
        }
        let width = self.n_classes_at(t);
        if record.logits.len() != width {
            return Err(Error::Data(format!(
                "example {} at snapshot {t}: {} logits, expected {width}",
                record.example_id,
                record.logits.len()
            )));
        }
        if let Some(&prev) = self.labels.get(&record.example_id) {
            if prev != record.label {
                return Err(Error::Data(format!(
                    "example {} logged with labels {prev} and {}",
                    record.example_id, record.label
                )));
            }
        }
        let slot = self.by_snapshot.entry(t).or_default();
        if slot.contains_key(&record.example_id) {
            return Err(Error::Data(format!(
                "example {} logged twice at snapshot {t}",
                record.example_id
            )));
        }
        self.labels.insert(record.example_id, record.label);
        slot.insert(record.example_id, record);
        Ok(())
    }

    /// Records at snapshot `t` whose label belongs to a task accepted by
    /// `keep`. Errors if any known example of such a task is missing.
    pub(crate) fn covered<F>(&self, t: usize, keep: F) -> Result<Vec<&PredictionRecord>>
    where
        F: Fn(usize) -> bool,
    {
        let slot = self.by_snapshot.get(&t);
        let missing: Vec<u64> = self
            .labels
            .iter()
            .filter(|(id, &label)| {
                keep(self.task_of(label)) && !slot.is_some_and(|s| s.contains_key(id))
            })
            .map(|(&id, _)| id)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingRecords {
                snapshot: t,
                ids: missing,
            });
        }
        Ok(slot
            .into_iter()
            .flat_map(|s| s.values())
            .filter(|r| keep(self.task_of(r.label)))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str("class_to_task");
        for t in &self.class_to_task {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for r in self.records() {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.snapshot,
                r.example_id,
                r.label,
                self.task_of(r.label)
            );
            for v in &r.logits {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses the text format; errors carry the 1-based line number.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(origin, format!("line {line}"), msg);
        // a cut inside a number would still parse; the final newline marks a complete file
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(err(text.lines().count(), "truncated (no final newline)".into()));
        }
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(err(n, format!("expected header {HEADER:?}, found {other:?}"))),
            None => return Err(err(1, "empty log".into())),
        }
        let (n, mapping) = lines
            .next()
            .ok_or_else(|| err(2, "missing class_to_task line".into()))?;
        let mut fields = mapping.split(',');
        if fields.next() != Some("class_to_task") {
            return Err(err(n, "expected class_to_task line".into()));
        }
        let class_to_task = fields
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(n, format!("bad task index: {e}")))?;
        let mut log = Self::new(class_to_task).map_err(|e| err(n, e.to_string()))?;

        for (n, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() < 5 {
                return Err(err(n, format!("expected at least 5 fields, found {}", f.len())));
            }
            let int = |i: usize, name: &str| {
                f[i].parse::<u64>()
                    .map_err(|e| err(n, format!("bad {name} {:?}: {e}", f[i])))
            };
            let snapshot = int(0, "snapshot")? as usize;
            let example_id = int(1, "example_id")?;
            let label = int(2, "label")? as usize;
            let task = int(3, "task")? as usize;
            let logits = f[4..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(n, format!("bad logit: {e}")))?;
            if label < log.n_classes() && log.task_of(label) != task {
                return Err(err(
                    n,
                    format!("task column {task} disagrees with class_to_task ({})", log.task_of(label)),
                ));
            }
            log.push(PredictionRecord {
                snapshot,
                example_id,
                label,
                logits,
            })
            .map_err(|e| err(n, e.to_string()))?;
        }
        Ok(log)
    }
}
