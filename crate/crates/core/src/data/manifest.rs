//! Text manifest describing how a task sequence was built.
//!
//! The manifest records the data source (IDX paths or generator settings),
//! the class → task blocks and a content fingerprint. Rebuilding from a
//! manifest reproduces the sequence bit for bit, and the fingerprint check
//! catches drift in the underlying files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_task_sequence, load_idx, ClassOrder, CrossTaskConfig, TaskSequence};
use crate::{Error, Result};

const FORMAT: &str = "cil-task-sequence/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub n_tasks: usize,
    #[serde(default = "default_order")]
    pub class_order: ClassOrder,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_order() -> ClassOrder {
    ClassOrder::Identity
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Idx(IdxSource),
    Crosstask(CrossTaskConfig),
}

impl DatasetSource {
    /// The same source with relative IDX paths joined onto `base_dir` and
    /// made absolute, so it can be rebuilt from anywhere.
    pub fn resolved(&self, base_dir: &Path) -> Result<Self> {
        let mut out = self.clone();
        if let DatasetSource::Idx(src) = &mut out {
            for p in [
                &mut src.train_images,
                &mut src.train_labels,
                &mut src.test_images,
                &mut src.test_labels,
            ] {
                let joined = base_dir.join(&*p);
                *p = std::path::absolute(&joined).map_err(|e| Error::io(&joined, e))?;
            }
        }
        Ok(out)
    }

    /// Builds the sequence; relative IDX paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<TaskSequence> {
        match self.resolved(base_dir)? {
            DatasetSource::Crosstask(cfg) => cfg.generate(),
            DatasetSource::Idx(src) => {
                let train = load_idx(&src.train_images, &src.train_labels)?;
                let mut test = load_idx(&src.test_images, &src.test_labels)?;
                let offset = train.len() as u64;
                test.iter_mut().for_each(|e| e.id += offset);
                build_task_sequence(train, test, src.n_tasks, &src.class_order, src.val_fraction, src.seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    pub index: usize,
    pub classes: Vec<usize>,
    /// Classes before remapping, in the same order as `classes`.
    pub original_classes: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub format: String,
    pub fingerprint: String,
    pub source: DatasetSource,
    pub task: Vec<TaskBlock>,
}

impl SequenceManifest {
    pub fn from_sequence(seq: &TaskSequence, source: DatasetSource) -> Self {
        let task = seq
            .tasks()
            .iter()
            .map(|t| TaskBlock {
                index: t.index,
                classes: t.classes.clone(),
                original_classes: t.classes.iter().map(|&c| seq.class_order()[c]).collect(),
                n_train: t.train.len(),
                n_val: t.val.len(),
                n_test: t.test.len(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            fingerprint: fingerprint(seq),
            source,
            task,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let m: Self =
            toml::from_str(text).map_err(|e| Error::parse(origin, "manifest", e.to_string()))?;
        if m.format != FORMAT {
            return Err(Error::parse(
                origin,
                "format",
                format!("expected {FORMAT:?}, found {:?}", m.format),
            ));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Rebuilds the sequence and checks it against the recorded blocks and
    /// fingerprint.
    pub fn rebuild(&self, base_dir: &Path) -> Result<TaskSequence> {
        let seq = self.source.build(base_dir)?;
        let again = Self::from_sequence(&seq, self.source.clone());
        if again.task != self.task {
            return Err(Error::Data("rebuilt task blocks differ from the manifest".into()));
        }
        if again.fingerprint != self.fingerprint {
            return Err(Error::Data(format!(
                "dataset fingerprint changed: manifest {}, rebuilt {}",
                self.fingerprint, again.fingerprint
            )));
        }
        Ok(seq)
    }
}

/// SHA-256 over every example (task, split, id, label, input bits) in order.
pub fn fingerprint(seq: &TaskSequence) -> String {
    let mut h = Sha256::new();
    for task in seq.tasks() {
        h.update((task.index as u64).to_le_bytes());
        for (split, examples) in [(0u8, &task.train), (1, &task.val), (2, &task.test)] {
            h.update([split]);
            for e in examples {
                h.update(e.id.to_le_bytes());
                h.update((e.label as u64).to_le_bytes());
                for v in &e.input {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}
