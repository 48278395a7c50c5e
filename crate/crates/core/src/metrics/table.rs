//! Every metric of a run in one CSV.
//!
//! `cell` rows carry per-(t, k) entries, `summary` rows the per-snapshot
//! aggregates. Undefined entries (forgetting at t = 1) are left empty.
//! Floats use Rust's shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use super::{
    classic_forgetting, classic_forgetting_at, cumulative_forgetting, cumulative_forgetting_at,
    evaluate, AccuracyMatrix, CumulativeLedger, PredictionLog,
};
use crate::{Error, Result};

pub const METRICS_CSV_HEADER: &str =
    "row,t,k,a,b,f_classic,f_cumulative,A,F,F_cumulative,A_taw,A_tinf";

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub t: usize,
    pub k: usize,
    pub a: f64,
    pub b: f64,
    /// `None` for `k = t`.
    pub f_classic: Option<f64>,
    /// Zero on the diagonal by construction.
    pub f_cumulative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub t: usize,
    pub a: f64,
    pub f: Option<f64>,
    pub f_cumulative: Option<f64>,
    pub a_taw: f64,
    pub a_tinf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub cells: Vec<CellRow>,
    pub summaries: Vec<SummaryRow>,
}

impl MetricsTable {
    pub fn compute(log: &PredictionLog) -> Result<Self> {
        let last = log
            .last_snapshot()
            .ok_or_else(|| Error::Data("prediction log has no records".into()))?;
        Self::compute_until(log, last)
    }

    /// Metrics for snapshots `1..=t` only.
    pub fn compute_until(log: &PredictionLog, t_max: usize) -> Result<Self> {
        let last = log
            .last_snapshot()
            .ok_or_else(|| Error::Data("prediction log has no records".into()))?;
        if t_max == 0 || t_max > last {
            return Err(Error::Config(format!("snapshot {t_max} outside 1..={last}")));
        }
        let matrix = AccuracyMatrix::from_log(log)?;
        let ledger = CumulativeLedger::from_log(log)?;
        let mut cells = Vec::new();
        let mut summaries = Vec::new();
        for t in 1..=t_max {
            for k in 1..=t {
                cells.push(CellRow {
                    t,
                    k,
                    a: matrix.get(t, k),
                    b: ledger.get(t, k),
                    f_classic: (k < t).then(|| classic_forgetting_at(&matrix, t, k)),
                    f_cumulative: cumulative_forgetting_at(&ledger, t, k),
                });
            }
            let report = evaluate(log, t)?;
            summaries.push(SummaryRow {
                t,
                a: matrix.average(t),
                f: (t >= 2).then(|| classic_forgetting(&matrix, t)).transpose()?.map(|x| x.1),
                f_cumulative: (t >= 2)
                    .then(|| cumulative_forgetting(&ledger, t))
                    .transpose()?
                    .map(|x| x.1),
                a_taw: report.a_taw,
                a_tinf: report.a_tinf,
            });
        }
        Ok(Self { cells, summaries })
    }

    /// Summary of the last snapshot.
    pub fn last(&self) -> &SummaryRow {
        self.summaries.last().expect("compute never yields an empty table")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "cell,{},{},{:?},{:?},{},{:?},,,,,",
                c.t,
                c.k,
                c.a,
                c.b,
                opt(c.f_classic),
                c.f_cumulative
            );
        }
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "summary,{},,,,,,{:?},{},{},{:?},{:?}",
                s.t,
                s.a,
                opt(s.f),
                opt(s.f_cumulative),
                s.a_taw,
                s.a_tinf
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PredictionRecord;

    #[test]
    fn two_snapshot_table() {
        let mut log = PredictionLog::new(vec![1, 2]).unwrap();
        let push = |log: &mut PredictionLog, t, id, label, logits: &[f64]| {
            log.push(PredictionRecord {
                snapshot: t,
                example_id: id,
                label,
                logits: logits.to_vec(),
            })
            .unwrap()
        };
        push(&mut log, 1, 0, 0, &[1.0]);
        push(&mut log, 2, 0, 0, &[0.0, 1.0]);
        push(&mut log, 2, 1, 1, &[0.0, 1.0]);
        let table = MetricsTable::compute(&log).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[1], "cell,1,1,1.0,1.0,,0.0,,,,,");
        assert_eq!(lines[2], "cell,2,1,0.0,1.0,1.0,0.0,,,,,");
        assert_eq!(lines[3], "cell,2,2,1.0,0.5,,0.0,,,,,");
        assert_eq!(lines[4], "summary,1,,,,,,1.0,,,1.0,1.0");
        assert_eq!(lines[5], "summary,2,,,,,,0.5,1.0,0.0,1.0,0.5");
        assert_eq!(table.last().t, 2);
        let first = MetricsTable::compute_until(&log, 1).unwrap();
        assert_eq!(first.to_csv(), [lines[0], lines[1], lines[4], ""].join("\n"));
        assert!(MetricsTable::compute_until(&log, 3).is_err());
        for line in &lines {
            assert_eq!(line.split(',').count(), 12);
        }
    }

    #[test]
    fn empty_log_is_an_error() {
        let log = PredictionLog::new(vec![1]).unwrap();
        assert!(MetricsTable::compute(&log).is_err());
    }
}
