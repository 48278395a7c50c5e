//! Exemplar memory for rehearsal.
//!
//! Exemplars are kept per class in selection order, so the first `q` stored
//! exemplars of a class are exactly what selection with budget `q` would have
//! returned. Fixed-budget mode relies on this to shrink old classes by
//! truncation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{batch_inputs, rng_for, LabeledExample, TaskSpec};
use crate::nn::Model;
use crate::{Error, Result};

const RANDOM_SELECTION_STREAM: u64 = 0x5e1ec7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Herding,
    Random,
}

/// Written in configs as `20` (or `"20"`), `"fixed2000"` or `"max"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMemoryMode", into = "String")]
pub enum MemoryMode {
    /// `per_class` exemplars for every class seen so far.
    Growing { per_class: usize },
    /// At most `total` exemplars shared evenly between seen classes.
    Fixed { total: usize },
    /// Keep every training example (upper bound).
    Max,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMemoryMode {
    PerClass(usize),
    Text(String),
}

impl TryFrom<RawMemoryMode> for MemoryMode {
    type Error = String;

    fn try_from(raw: RawMemoryMode) -> std::result::Result<Self, String> {
        match raw {
            RawMemoryMode::PerClass(per_class) => Ok(MemoryMode::Growing { per_class }),
            RawMemoryMode::Text(text) => text.parse(),
        }
    }
}

impl From<MemoryMode> for String {
    fn from(mode: MemoryMode) -> String {
        mode.label()
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("memory {s:?}: expected a per-class count, \"fixed<total>\" or \"max\"");
        if s == "max" {
            return Ok(MemoryMode::Max);
        }
        if let Some(total) = s.strip_prefix("fixed") {
            return total.parse().map(|total| MemoryMode::Fixed { total }).map_err(|_| bad());
        }
        s.parse().map(|per_class| MemoryMode::Growing { per_class }).map_err(|_| bad())
    }
}

impl MemoryMode {
    pub fn label(&self) -> String {
        match self {
            MemoryMode::Growing { per_class } => format!("{per_class}"),
            MemoryMode::Fixed { total } => format!("fixed{total}"),
            MemoryMode::Max => "max".into(),
        }
    }
}

/// Greedy herding: with `μ` the mean of `features`, step `k` picks the unused
/// index minimising `‖μ − (φ_i + Σ_{j<k} φ_{p_j}) / k‖²`. Ties go to the lowest
/// index. Returns indices in selection order.
pub fn herding_select(features: &[Vec<f64>], budget: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Data("herding needs at least one candidate".into()));
    }
    if budget == 0 || budget > n {
        return Err(Error::Config(format!(
            "herding budget {budget} must lie in 1..={n}"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Data("herding features have inconsistent widths".into()));
    }

    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut running = vec![0.0; dim];
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(budget);
    for k in 1..=budget {
        let kf = k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(&running)
                .zip(f)
                .map(|((m, s), v)| {
                    let d = m - (s + v) / kf;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("budget <= n leaves a candidate");
        used[pick] = true;
        for (s, v) in running.iter_mut().zip(&features[pick]) {
            *s += v;
        }
        order.push(pick);
    }
    Ok(order)
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    per_class: BTreeMap<usize, Vec<LabeledExample>>,
    mode: MemoryMode,
    strategy: SelectionStrategy,
    seed: u64,
}

impl MemoryBuffer {
    pub fn new(mode: MemoryMode, strategy: SelectionStrategy, seed: u64) -> Result<Self> {
        match mode {
            MemoryMode::Growing { per_class: 0 } | MemoryMode::Fixed { total: 0 } => {
                return Err(Error::Config("replay memory budget must be positive".into()))
            }
            _ => {}
        }
        Ok(Self {
            per_class: BTreeMap::new(),
            mode,
            strategy,
            seed,
        })
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn per_class(&self) -> &BTreeMap<usize, Vec<LabeledExample>> {
        &self.per_class
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All exemplars, ascending by class, selection order within a class.
    pub fn examples(&self) -> impl Iterator<Item = &LabeledExample> {
        self.per_class.values().flatten()
    }

    /// Adds exemplars for the classes of `task`, choosing them with the
    /// current extractor's features. In fixed mode older classes are
    /// truncated to the new per-class quota.
    pub fn update(&mut self, task: &TaskSpec, model: &Model) -> Result<()> {
        let n_seen = self.per_class.len() + task.classes.len();
        let quota = match self.mode {
            MemoryMode::Growing { per_class } => Some(per_class),
            MemoryMode::Fixed { total } => {
                let q = total / n_seen;
                if q == 0 {
                    return Err(Error::Config(format!(
                        "fixed memory of {total} cannot hold one exemplar for each of {n_seen} classes"
                    )));
                }
                for kept in self.per_class.values_mut() {
                    kept.truncate(q);
                }
                Some(q)
            }
            MemoryMode::Max => None,
        };

        for &class in &task.classes {
            let candidates: Vec<&LabeledExample> =
                task.train.iter().filter(|e| e.label == class).collect();
            if candidates.is_empty() {
                return Err(Error::Data(format!(
                    "class {class} has no training examples to store"
                )));
            }
            let chosen: Vec<usize> = match quota {
                None => (0..candidates.len()).collect(),
                Some(q) => {
                    let budget = q.min(candidates.len());
                    match self.strategy {
                        SelectionStrategy::Herding => {
                            let feats = model.features(&batch_inputs(candidates.iter().copied())?)?;
                            let rows: Vec<Vec<f64>> =
                                (0..feats.rows()).map(|i| feats.row(i).to_vec()).collect();
                            herding_select(&rows, budget)?
                        }
                        SelectionStrategy::Random => {
                            let mut idx: Vec<usize> = (0..candidates.len()).collect();
                            let mut rng =
                                rng_for(self.seed ^ (class as u64) << 20, RANDOM_SELECTION_STREAM);
                            idx.shuffle(&mut rng);
                            idx.truncate(budget);
                            idx
                        }
                    }
                }
            };
            self.per_class
                .insert(class, chosen.into_iter().map(|i| candidates[i].clone()).collect());
        }
        Ok(())
    }

    /// `class: id id ...` per line, classes ascending, selection order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (class, ex) in &self.per_class {
            let _ = write!(out, "{class}:");
            for e in ex {
                let _ = write!(out, " {}", e.id);
            }
            out.push('\n');
        }
        out
    }
}

/// `D^t ∪ M`: the current task's training data followed by every exemplar.
/// Shuffling happens per epoch in the trainer.
pub fn training_pool(buffer: &MemoryBuffer, current: &TaskSpec) -> Vec<LabeledExample> {
    current
        .train
        .iter()
        .chain(buffer.examples())
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Dense;

    /// Independent greedy reference: recomputes the candidate-set mean from
    /// the chosen list at every step.
    fn greedy_oracle(features: &[Vec<f64>], budget: usize) -> Vec<usize> {
        let n = features.len();
        let d = features[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| features.iter().fold(0.0, |acc, f| acc + f[j]) / n as f64)
            .collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < budget {
            let k = (chosen.len() + 1) as f64;
            let scores: Vec<(usize, f64)> = (0..n)
                .filter(|i| !chosen.contains(i))
                .map(|i| {
                    let score = (0..d)
                        .map(|j| {
                            let prev = chosen.iter().fold(0.0, |acc, &p| acc + features[p][j]);
                            let diff = mean[j] - (prev + features[i][j]) / k;
                            diff * diff
                        })
                        .fold(0.0, |a, b| a + b);
                    (i, score)
                })
                .collect();
            let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            chosen.push(scores.iter().find(|s| s.1 == min).unwrap().0);
        }
        chosen
    }

    #[test]
    fn three_points_tie_goes_to_lowest_index() {
        let f = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(herding_select(&f, 2).unwrap(), vec![1, 0]);
        assert_eq!(herding_select(&f, 3).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn full_budget_returns_permutation_starting_nearest_mean() {
        let f = vec![vec![5.0, 1.0], vec![0.9, 1.1], vec![-3.0, 0.0], vec![1.0, 2.0]];
        let order = herding_select(&f, 4).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        // mean is (0.975, 1.025)
        assert_eq!(order[0], 1);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(1..=20);
            let d = rng.random_range(1..=4);
            let integral = rng.random_bool(0.5);
            let f: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            if integral {
                                rng.random_range(-2..=2) as f64
                            } else {
                                rng.random_range(-1.0..1.0)
                            }
                        })
                        .collect()
                })
                .collect();
            let budget = rng.random_range(1..=n.min(5));
            assert_eq!(herding_select(&f, budget).unwrap(), greedy_oracle(&f, budget));
        }
    }

    #[test]
    fn rejects_empty_and_oversized() {
        assert!(matches!(herding_select(&[], 1), Err(Error::Data(_))));
        assert!(herding_select(&[vec![1.0]], 2).is_err());
        assert!(herding_select(&[vec![1.0]], 0).is_err());
    }

    fn identity_model(dim: usize) -> Model {
        let mut head = Dense::zeros(dim, 0);
        head.weight.trainable = true;
        Model::from_parts(vec![], head, vec![])
    }

    fn task(index: usize, classes: &[usize], per_class: usize) -> TaskSpec {
        let mut train = Vec::new();
        for &c in classes {
            for i in 0..per_class {
                train.push(LabeledExample {
                    id: (c * 1000 + i) as u64,
                    input: vec![c as f64, (i * i % 13) as f64 / 13.0],
                    label: c,
                });
            }
        }
        TaskSpec {
            index,
            classes: classes.to_vec(),
            train,
            val: vec![],
            test: vec![],
        }
    }

    #[test]
    fn growing_mode_adds_per_class_budget() {
        let model = identity_model(2);
        let mut buf =
            MemoryBuffer::new(MemoryMode::Growing { per_class: 20 }, SelectionStrategy::Herding, 0)
                .unwrap();
        let classes: Vec<usize> = (0..10).collect();
        buf.update(&task(1, &classes, 45), &model).unwrap();
        assert_eq!(buf.len(), 200);
        let classes: Vec<usize> = (10..20).collect();
        buf.update(&task(2, &classes, 45), &model).unwrap();
        assert_eq!(buf.len(), 400);
        assert!(buf.per_class().values().all(|v| v.len() == 20));
    }

    #[test]
    fn growing_mode_saturates_small_classes() {
        let model = identity_model(2);
        let mut buf =
            MemoryBuffer::new(MemoryMode::Growing { per_class: 50 }, SelectionStrategy::Herding, 0)
                .unwrap();
        buf.update(&task(1, &[0, 1], 7), &model).unwrap();
        assert_eq!(buf.len(), 14);
    }

    #[test]
    fn fixed_mode_quota_arithmetic_and_prefix_truncation() {
        let model = identity_model(2);
        let mut buf =
            MemoryBuffer::new(MemoryMode::Fixed { total: 2000 }, SelectionStrategy::Herding, 0)
                .unwrap();
        let t1: Vec<usize> = (0..10).collect();
        buf.update(&task(1, &t1, 300), &model).unwrap();
        assert!(buf.per_class().values().all(|v| v.len() == 200));
        let before = buf.per_class()[&3].clone();
        let t2: Vec<usize> = (10..20).collect();
        buf.update(&task(2, &t2, 300), &model).unwrap();
        assert!(buf.per_class().values().all(|v| v.len() == 100));
        assert_eq!(buf.per_class()[&3][..], before[..100]);
        assert!(buf.len() <= 2000);
    }

    #[test]
    fn fixed_mode_too_small_is_error() {
        let model = identity_model(2);
        let mut buf =
            MemoryBuffer::new(MemoryMode::Fixed { total: 3 }, SelectionStrategy::Random, 0).unwrap();
        assert!(buf.update(&task(1, &[0, 1, 2, 3], 5), &model).is_err());
        assert!(MemoryBuffer::new(MemoryMode::Growing { per_class: 0 }, SelectionStrategy::Herding, 0)
            .is_err());
    }

    #[test]
    fn random_strategy_is_seeded() {
        let model = identity_model(2);
        let t = task(1, &[0, 1], 30);
        let run = |seed| {
            let mut b =
                MemoryBuffer::new(MemoryMode::Growing { per_class: 5 }, SelectionStrategy::Random, seed)
                    .unwrap();
            b.update(&t, &model).unwrap();
            b.manifest()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn max_mode_keeps_everything() {
        let model = identity_model(2);
        let mut buf = MemoryBuffer::new(MemoryMode::Max, SelectionStrategy::Herding, 0).unwrap();
        buf.update(&task(1, &[0, 1], 33), &model).unwrap();
        assert_eq!(buf.len(), 66);
    }

    #[test]
    fn pool_is_task_data_plus_memory() {
        let model = identity_model(2);
        let mut buf =
            MemoryBuffer::new(MemoryMode::Growing { per_class: 20 }, SelectionStrategy::Herding, 0)
                .unwrap();
        let t1 = task(1, &(0..10).collect::<Vec<_>>(), 90);
        assert_eq!(training_pool(&buf, &t1).len(), 900);
        buf.update(&t1, &model).unwrap();
        let t2 = task(2, &(10..20).collect::<Vec<_>>(), 90);
        let pool = training_pool(&buf, &t2);
        assert_eq!(pool.len(), 1100);
        for e in buf.examples() {
            assert_eq!(pool.iter().filter(|p| p.id == e.id).count(), 1);
        }
    }

    #[test]
    fn manifest_lists_ids_in_selection_order() {
        let model = identity_model(1);
        let t = TaskSpec {
            index: 1,
            classes: vec![0],
            train: [0.0, 1.0, 2.0]
                .iter()
                .enumerate()
                .map(|(i, &v)| LabeledExample {
                    id: 10 + i as u64,
                    input: vec![v],
                    label: 0,
                })
                .collect(),
            val: vec![],
            test: vec![],
        };
        let mut buf =
            MemoryBuffer::new(MemoryMode::Growing { per_class: 2 }, SelectionStrategy::Herding, 0)
                .unwrap();
        buf.update(&t, &model).unwrap();
        assert_eq!(buf.manifest(), "0: 11 10\n");
    }

    #[test]
    fn memory_mode_config_forms() {
        #[derive(Deserialize)]
        struct Wrap {
            memory: Vec<MemoryMode>,
        }
        let w: Wrap = toml::from_str(r#"memory = [20, "5", "fixed2000", "max"]"#).unwrap();
        assert_eq!(
            w.memory,
            vec![
                MemoryMode::Growing { per_class: 20 },
                MemoryMode::Growing { per_class: 5 },
                MemoryMode::Fixed { total: 2000 },
                MemoryMode::Max
            ]
        );
        for m in &w.memory {
            assert_eq!(m.label().parse::<MemoryMode>().unwrap(), *m);
        }
        assert!(toml::from_str::<Wrap>(r#"memory = ["lots"]"#).is_err());
        assert!(toml::from_str::<Wrap>(r#"memory = ["fixedx"]"#).is_err());
    }
}
