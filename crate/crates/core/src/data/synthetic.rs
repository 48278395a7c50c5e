//! Two-task toy problem separating intra-task from cross-task features.
//!
//! Each input is `(color, shape, distractors...)` with `color, shape ∈ {-1, +1}`
//! plus isotropic Gaussian noise on every coordinate. Task 1 holds the two
//! colors with `shape = -1`, task 2 the two colors with `shape = +1`. Color
//! alone solves either task; telling a task-1 class from the same-colored
//! task-2 class needs the shape coordinate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_for, split_validation, stream, LabeledExample, TaskSequence, TaskSpec};
use crate::{Error, Result};

/// Class means in label order: (color, shape).
pub const CROSSTASK_MEANS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossTaskConfig {
    pub n_per_class: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub distractor_dims: usize,
    /// Test examples per class; defaults to `n_per_class`.
    #[serde(default)]
    pub n_test_per_class: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

impl CrossTaskConfig {
    pub fn new(n_per_class: usize, noise_sigma: f64, distractor_dims: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            noise_sigma,
            distractor_dims,
            n_test_per_class: None,
            val_fraction: default_val_fraction(),
            seed,
        }
    }

    pub fn generate(&self) -> Result<TaskSequence> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        let n_test = self.n_test_per_class.unwrap_or(self.n_per_class);
        let noise = Normal::new(0.0, self.noise_sigma)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

        let mut train_rng = rng_for(self.seed, stream::SYNTH_TRAIN);
        let mut test_rng = rng_for(self.seed, stream::SYNTH_TEST);
        let train_total = 4 * self.n_per_class;
        let mut tasks = Vec::with_capacity(2);
        for task in 0..2 {
            let classes = [2 * task, 2 * task + 1];
            let mut train = Vec::new();
            let mut test = Vec::new();
            for &label in &classes {
                for i in 0..self.n_per_class {
                    let id = (label * self.n_per_class + i) as u64;
                    train.push(self.sample(label, id, &noise, &mut train_rng));
                }
                for i in 0..n_test {
                    let id = (train_total + label * n_test + i) as u64;
                    test.push(self.sample(label, id, &noise, &mut test_rng));
                }
            }
            let (train, val) =
                split_validation(train, self.val_fraction, self.seed.wrapping_add(task as u64))?;
            tasks.push(TaskSpec {
                index: task + 1,
                classes: classes.to_vec(),
                train,
                val,
                test,
            });
        }
        TaskSequence::new(tasks, vec![0, 1, 2, 3], self.seed)
    }

    fn sample<R: Rng>(&self, label: usize, id: u64, noise: &Normal<f64>, rng: &mut R) -> LabeledExample {
        let (color, shape) = CROSSTASK_MEANS[label];
        let mut input = Vec::with_capacity(2 + self.distractor_dims);
        input.push(color + noise.sample(rng));
        input.push(shape + noise.sample(rng));
        for _ in 0..self.distractor_dims {
            input.push(noise.sample(rng));
        }
        LabeledExample { id, input, label }
    }
}

/// 2 tasks × 2 classes; see the module docs for the construction.
pub fn gen_crosstask(
    n_per_class: usize,
    noise_sigma: f64,
    distractor_dims: usize,
    seed: u64,
) -> Result<TaskSequence> {
    CrossTaskConfig::new(n_per_class, noise_sigma, distractor_dims, seed).generate()
}
