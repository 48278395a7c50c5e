//! Evaluation of class-incremental runs from prediction logs.
//!
//! Notation: `t` is the snapshot (model after learning task `t`), `k` a task
//! or cumulative task, both 1-based.
//!
//! - `a[t][k]`: accuracy on task `k`'s test set, argmax over every class seen
//!   at `t` (class-IL usage of the classic task metric).
//! - `b[t][k]`: cumulative accuracy, test set of tasks `1..=k` with the argmax
//!   restricted to the classes of tasks `1..=k`.
//! - classic forgetting `f[t][k] = max_{k<=i<t} a[i][k] - a[t][k]`.
//! - cumulative forgetting `f[t][k] = max_{k<=i<=t} b[i][k] - b[t][k]`.
//! - task-aware accuracy: argmax restricted to the true task's classes,
//!   averaged per task then across tasks.
//! - task-inference accuracy: fraction of examples whose full argmax falls in
//!   the true task.
//!
//! Every argmax breaks ties towards the lowest class index.

mod log;
mod table;

pub use log::{PredictionLog, PredictionRecord};
pub use table::{MetricsTable, SummaryRow, CellRow, METRICS_CSV_HEADER};

use crate::{Error, Result};

/// Index of the largest value in `logits[range]`; ties → lowest index.
fn argmax_in(logits: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for c in range {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// ŷ_k: argmax over the classes of tasks `1..=k` only.
pub fn restricted_predict(logits: &[f64], class_to_task: &[usize], k: usize) -> Result<usize> {
    let width = class_to_task.iter().filter(|&&task| task <= k).count();
    let has_k = class_to_task.contains(&k);
    if k == 0 || !has_k || width > logits.len() {
        return Err(Error::Config(format!(
            "cannot restrict {} logits to cumulative task {k}",
            logits.len()
        )));
    }
    Ok(argmax_in(logits, 0..width))
}

fn class_range(class_to_task: &[usize], task: usize) -> std::ops::Range<usize> {
    let start = class_to_task.iter().filter(|&&t| t < task).count();
    let end = class_to_task.iter().filter(|&&t| t <= task).count();
    start..end
}

fn check_snapshot(log: &PredictionLog, t: usize) -> Result<()> {
    if t == 0 || t > log.n_tasks() {
        return Err(Error::Config(format!(
            "snapshot {t} outside 1..={}",
            log.n_tasks()
        )));
    }
    Ok(())
}

fn ratio(hits: usize, total: usize, what: impl FnOnce() -> String) -> Result<f64> {
    if total == 0 {
        return Err(Error::Data(format!("no test examples for {}", what())));
    }
    Ok(hits as f64 / total as f64)
}

/// b^t_k.
pub fn cumulative_accuracy(log: &PredictionLog, t: usize, k: usize) -> Result<f64> {
    check_snapshot(log, t)?;
    if k == 0 || k > t {
        return Err(Error::Config(format!("cumulative task {k} not learned at snapshot {t}")));
    }
    let records = log.covered(t, |task| task <= k)?;
    let mut hits = 0;
    for r in &records {
        if restricted_predict(&r.logits, log.class_to_task(), k)? == r.label {
            hits += 1;
        }
    }
    ratio(hits, records.len(), || format!("cumulative task {k} at snapshot {t}"))
}

/// Accuracies `a^t_k` for `k = 1..=t` and their mean `A_t`.
pub fn classic_accuracy(log: &PredictionLog, t: usize) -> Result<(Vec<f64>, f64)> {
    check_snapshot(log, t)?;
    let records = log.covered(t, |task| task <= t)?;
    let mut hits = vec![0usize; t];
    let mut totals = vec![0usize; t];
    for r in &records {
        let k = log.task_of(r.label);
        totals[k - 1] += 1;
        if argmax_in(&r.logits, 0..r.logits.len()) == r.label {
            hits[k - 1] += 1;
        }
    }
    let per_task = (0..t)
        .map(|i| ratio(hits[i], totals[i], || format!("task {} at snapshot {t}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_task.iter().sum::<f64>() / t as f64;
    Ok((per_task, mean))
}

/// Lower-triangular `a[t][k]` (both 1-based; row `t` has `t` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Config(format!("row {} must have {} entries", i + 1, i + 1)));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("row {} has entries outside [0, 1]", i + 1)));
            }
        }
        Ok(Self { rows })
    }

    /// Builds rows `1..=log.last_snapshot()`.
    pub fn from_log(log: &PredictionLog) -> Result<Self> {
        let last = log.last_snapshot().unwrap_or(0);
        let rows = (1..=last)
            .map(|t| classic_accuracy(log, t).map(|(a, _)| a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.rows[t - 1][k - 1]
    }

    pub fn n_snapshots(&self) -> usize {
        self.rows.len()
    }

    /// A_t.
    pub fn average(&self, t: usize) -> f64 {
        self.rows[t - 1].iter().sum::<f64>() / t as f64
    }
}

/// Lower-triangular `b[t][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeLedger {
    rows: Vec<Vec<f64>>,
}

impl CumulativeLedger {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        AccuracyMatrix::from_rows(rows).map(|m| Self { rows: m.rows })
    }

    pub fn from_log(log: &PredictionLog) -> Result<Self> {
        let last = log.last_snapshot().unwrap_or(0);
        let rows = (1..=last)
            .map(|t| (1..=t).map(|k| cumulative_accuracy(log, t, k)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.rows[t - 1][k - 1]
    }

    pub fn n_snapshots(&self) -> usize {
        self.rows.len()
    }
}

fn check_forgetting(t: usize, available: usize) -> Result<()> {
    if t < 2 {
        return Err(Error::Undefined(format!(
            "forgetting needs at least two snapshots (t = {t})"
        )));
    }
    if t > available {
        return Err(Error::Config(format!(
            "snapshot {t} not available ({available} recorded)"
        )));
    }
    Ok(())
}

/// Cumulative forgetting `f^t_k` for `k < t` and its mean `F^t_Σ`. The max
/// runs over the defined entries `b^i_k`, `k <= i <= t`.
pub fn cumulative_forgetting(ledger: &CumulativeLedger, t: usize) -> Result<(Vec<f64>, f64)> {
    check_forgetting(t, ledger.n_snapshots())?;
    let f: Vec<f64> = (1..t).map(|k| cumulative_forgetting_at(ledger, t, k)).collect();
    let mean = f.iter().sum::<f64>() / (t - 1) as f64;
    Ok((f, mean))
}

pub(crate) fn cumulative_forgetting_at(ledger: &CumulativeLedger, t: usize, k: usize) -> f64 {
    let best = (k..=t).map(|i| ledger.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
    best - ledger.get(t, k)
}

/// Classic forgetting `f^t_k = max_{k<=i<t} a^i_k - a^t_k` for `k < t` and its
/// mean `F^t`.
pub fn classic_forgetting(matrix: &AccuracyMatrix, t: usize) -> Result<(Vec<f64>, f64)> {
    check_forgetting(t, matrix.n_snapshots())?;
    let f: Vec<f64> = (1..t).map(|k| classic_forgetting_at(matrix, t, k)).collect();
    let mean = f.iter().sum::<f64>() / (t - 1) as f64;
    Ok((f, mean))
}

pub(crate) fn classic_forgetting_at(matrix: &AccuracyMatrix, t: usize, k: usize) -> f64 {
    let best = (k..t).map(|i| matrix.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
    best - matrix.get(t, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub a_taw: f64,
    pub a_tinf: f64,
    /// Task-aware accuracy of each task `1..=t`.
    pub taw_per_task: Vec<f64>,
    /// Share of each task's examples predicted inside that task.
    pub tinf_per_task: Vec<f64>,
}

/// Task-aware and task-inference accuracy at snapshot `t`.
pub fn evaluate(log: &PredictionLog, t: usize) -> Result<EvalReport> {
    check_snapshot(log, t)?;
    let records = log.covered(t, |task| task <= t)?;
    let c2t = log.class_to_task();
    let mut totals = vec![0usize; t];
    let mut aware = vec![0usize; t];
    let mut inferred = vec![0usize; t];
    for r in &records {
        let k = log.task_of(r.label);
        totals[k - 1] += 1;
        if argmax_in(&r.logits, class_range(c2t, k)) == r.label {
            aware[k - 1] += 1;
        }
        if c2t[argmax_in(&r.logits, 0..r.logits.len())] == k {
            inferred[k - 1] += 1;
        }
    }
    let taw_per_task = (0..t)
        .map(|i| ratio(aware[i], totals[i], || format!("task {} at snapshot {t}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let tinf_per_task = (0..t)
        .map(|i| ratio(inferred[i], totals[i], || format!("task {} at snapshot {t}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let a_taw = taw_per_task.iter().sum::<f64>() / t as f64;
    let a_tinf = ratio(inferred.iter().sum(), records.len(), || format!("snapshot {t}"))?;
    Ok(EvalReport {
        a_taw,
        a_tinf,
        taw_per_task,
        tinf_per_task,
    })
}

/// A_taw at snapshot `t`.
pub fn task_aware_accuracy(log: &PredictionLog, t: usize) -> Result<f64> {
    evaluate(log, t).map(|r| r.a_taw)
}

/// A_tinf at snapshot `t`.
pub fn task_inference_accuracy(log: &PredictionLog, t: usize) -> Result<f64> {
    evaluate(log, t).map(|r| r.a_tinf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, id: u64, label: usize, logits: &[f64]) -> PredictionRecord {
        PredictionRecord {
            snapshot: t,
            example_id: id,
            label,
            logits: logits.to_vec(),
        }
    }

    #[test]
    fn restricted_argmax() {
        let c2t = [1, 1, 2, 2];
        let logits = [0.1, 0.2, 0.9, 0.3];
        assert_eq!(restricted_predict(&logits, &c2t, 1).unwrap(), 1);
        assert_eq!(restricted_predict(&logits, &c2t, 2).unwrap(), 2);
        assert!(restricted_predict(&logits[..2], &c2t, 2).is_err());
        assert!(restricted_predict(&logits, &c2t, 3).is_err());
        assert_eq!(restricted_predict(&[1.0, 1.0], &[1, 1], 1).unwrap(), 0);
    }

    #[test]
    fn prediction_changes_with_restriction() {
        // true class 1: correct under ŷ_1, wrong under ŷ_2
        let mut log = PredictionLog::new(vec![1, 1, 2, 2]).unwrap();
        log.push(rec(2, 0, 1, &[0.1, 0.2, 0.9, 0.3])).unwrap();
        log.push(rec(1, 0, 1, &[0.1, 0.2])).unwrap();
        assert_eq!(cumulative_accuracy(&log, 2, 1).unwrap(), 1.0);
        assert_eq!(cumulative_accuracy(&log, 2, 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_count_cumulative_accuracy() {
        let mut log = PredictionLog::new(vec![1, 1, 2, 2]).unwrap();
        // four task-1 examples at snapshot 2; three correct under restriction
        // to {0, 1} even though two of them lose to class 2 in the full head
        let rows: [(usize, [f64; 4]); 4] = [
            (0, [0.9, 0.1, 2.0, 0.0]),
            (1, [0.2, 0.8, 0.0, 0.0]),
            (0, [0.4, 0.3, 5.0, 0.0]),
            (1, [0.7, 0.6, 0.0, 0.0]),
        ];
        for (i, (label, l)) in rows.iter().enumerate() {
            log.push(rec(2, i as u64, *label, l)).unwrap();
            log.push(rec(1, i as u64, *label, &l[..2])).unwrap();
        }
        assert_eq!(cumulative_accuracy(&log, 2, 1).unwrap(), 0.75);
        // b^2_2 equals plain full-head accuracy
        assert_eq!(cumulative_accuracy(&log, 2, 2).unwrap(), 0.25);
        assert!(matches!(cumulative_accuracy(&log, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn cumulative_forgetting_hand_values() {
        let ledger =
            CumulativeLedger::from_rows(vec![vec![0.9], vec![0.85, 0.7], vec![0.9, 0.65, 0.6]])
                .unwrap();
        let (f, mean) = cumulative_forgetting(&ledger, 3).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.05).abs() < 1e-12);
        assert!((mean - 0.025).abs() < 1e-12);
        let ledger = CumulativeLedger::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        let (f, _) = cumulative_forgetting(&ledger, 2).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-12);
        assert!(matches!(cumulative_forgetting(&ledger, 1), Err(Error::Undefined(_))));
    }

    #[test]
    fn backward_transfer_gives_zero_cumulative_forgetting() {
        let ledger =
            CumulativeLedger::from_rows(vec![vec![0.5], vec![0.6, 0.4], vec![0.7, 0.5, 0.3]])
                .unwrap();
        assert_eq!(cumulative_forgetting(&ledger, 3).unwrap().1, 0.0);
    }

    #[test]
    fn classic_forgetting_hand_values() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8], vec![0.75, 0.6, 0.5]])
            .unwrap();
        let (f, mean) = classic_forgetting(&m, 3).unwrap();
        assert!((f[0] - 0.15).abs() < 1e-12);
        assert!((f[1] - 0.2).abs() < 1e-12);
        assert!((mean - 0.175).abs() < 1e-12);
        let flat = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.8, 0.8]]).unwrap();
        assert_eq!(classic_forgetting(&flat, 2).unwrap().1, 0.0);
        assert!(matches!(classic_forgetting(&m, 1), Err(Error::Undefined(_))));
        assert_eq!(m.average(2), 0.75);
    }

    #[test]
    fn classic_accuracy_from_log() {
        let mut log = PredictionLog::new(vec![1, 2]).unwrap();
        log.push(rec(1, 0, 0, &[0.3])).unwrap();
        assert_eq!(classic_accuracy(&log, 1).unwrap(), (vec![1.0], 1.0));
        // everything predicted in the wrong task
        log.push(rec(2, 0, 0, &[0.0, 1.0])).unwrap();
        log.push(rec(2, 1, 1, &[1.0, 0.0])).unwrap();
        assert_eq!(classic_accuracy(&log, 2).unwrap(), (vec![0.0, 0.0], 0.0));
    }

    #[test]
    fn task_aware_versus_inference() {
        let mut log = PredictionLog::new(vec![1, 1, 2, 2]).unwrap();
        // wrong class inside the right task: taw miss, tinf hit
        log.push(rec(2, 0, 0, &[0.1, 0.9, 0.0, 0.0])).unwrap();
        // right within task, but a task-2 class wins overall: taw hit, tinf miss
        log.push(rec(2, 1, 2, &[3.0, 0.0, 1.0, 0.5])).unwrap();
        let r = evaluate(&log, 2).unwrap();
        assert_eq!(r.taw_per_task, vec![0.0, 1.0]);
        assert_eq!(r.tinf_per_task, vec![1.0, 0.0]);
        assert_eq!(r.a_taw, 0.5);
        assert_eq!(r.a_tinf, 0.5);
    }

    #[test]
    fn task_aware_two_task_average() {
        let mut log = PredictionLog::new(vec![1, 1, 2, 2]).unwrap();
        let mut id = 0;
        for (task, correct) in [(1usize, 9), (2, 7)] {
            for i in 0..10 {
                let label = 2 * (task - 1);
                let mut l = vec![0.0; 4];
                l[if i < correct { label } else { label + 1 }] = 1.0;
                log.push(rec(2, id, label, &l)).unwrap();
                id += 1;
            }
        }
        assert!((task_aware_accuracy(&log, 2).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(task_inference_accuracy(&log, 2).unwrap(), 1.0);
    }
}
