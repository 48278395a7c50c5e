//! Config-driven experiment grids and their on-disk artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.toml                  RunManifest: hashes, paths, timings, errors
//! sequence.toml                  task sequence manifest with data fingerprint
//! aggregate.csv                  mean / stddev over seeds per (loss, memory, t)
//! sweep.csv                      final-snapshot summary per (loss, memory); sweeps only
//! cells/<loss>-<memory>-seed<s>/
//!     predictions.csv            prediction log
//!     metrics.csv                full metric table
//!     memory.txt                 exemplar ids per class after the last task
//! ```
//!
//! Cells are independent and run on a worker pool; everything written to the
//! CSVs is computed from the cell outputs in grid order, so they are
//! byte-identical across reruns and worker counts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSource, SequenceManifest, TaskSequence};
use crate::metrics::{MetricsTable, PredictionLog};
use crate::replay::{MemoryMode, SelectionStrategy};
use crate::train::{run_sequence, ExperimentConfig, LossKind, TrainConfig};
use crate::{Error, Result};

/// Default output root when `--out` is not given.
pub const OUTPUT_DIR_ENV: &str = "CIL_OUTPUT_DIR";

const MANIFEST_FORMAT: &str = "cil-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub losses: Vec<LossKind>,
    pub memory: Vec<MemoryMode>,
    #[serde(default = "default_selection")]
    pub selection: SelectionStrategy,
    pub seeds: Vec<u64>,
}

fn default_selection() -> SelectionStrategy {
    SelectionStrategy::Herding
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub grid: GridSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(origin, "config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Error::Config(format!("{name}: {msg}"));
        if self.workers == 0 {
            return Err(field("workers", "must be positive".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(field("model.hidden", format!("widths must be positive, got {:?}", self.model.hidden)));
        }
        self.train.validate().map_err(|e| field("train", e.to_string()))?;
        if self.grid.losses.is_empty() {
            return Err(field("grid.losses", "must not be empty".into()));
        }
        if self.grid.memory.is_empty() {
            return Err(field("grid.memory", "must not be empty".into()));
        }
        if self.grid.memory.iter().any(|m| matches!(m, MemoryMode::Growing { per_class: 0 } | MemoryMode::Fixed { total: 0 })) {
            return Err(field("grid.memory", "budgets must be positive".into()));
        }
        if self.grid.seeds.is_empty() {
            return Err(field("grid.seeds", "must not be empty".into()));
        }
        for (name, list) in [
            ("grid.losses", self.grid.losses.iter().map(|l| l.label().to_string()).collect::<Vec<_>>()),
            ("grid.memory", self.grid.memory.iter().map(MemoryMode::label).collect()),
            ("grid.seeds", self.grid.seeds.iter().map(u64::to_string).collect()),
        ] {
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(field(name, format!("duplicate entries in {list:?}")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML form (after any overrides).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Grid cells in the fixed order loss → memory → seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &loss in &self.grid.losses {
            for &memory in &self.grid.memory {
                for &seed in &self.grid.seeds {
                    out.push(Cell { loss, memory, seed });
                }
            }
        }
        out
    }

    fn experiment(&self, cell: &Cell) -> ExperimentConfig {
        ExperimentConfig {
            hidden: self.model.hidden.clone(),
            loss: cell.loss,
            memory: cell.memory,
            selection: self.grid.selection,
            train: self.train.clone(),
            seed: cell.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub loss: LossKind,
    pub memory: MemoryMode,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}-{}-seed{}", self.loss.label(), self.memory.label(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub loss: LossKind,
    pub memory: MemoryMode,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub predictions: PathBuf,
    pub metrics: PathBuf,
    pub memory_manifest: PathBuf,
    pub train_seconds: f64,
    pub metrics_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub config_sha256: String,
    pub dataset_fingerprint: String,
    pub seeds: Vec<u64>,
    /// Resolved config; running it again reproduces every CSV.
    pub config: PathBuf,
    pub sequence: PathBuf,
    pub aggregate: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<PathBuf>,
    pub dataset_seconds: f64,
    pub total_seconds: f64,
    pub cell: Vec<CellRecord>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self =
            toml::from_str(&text).map_err(|e| Error::parse(path, "manifest", e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::parse(path, "format", format!("unsupported {:?}", m.format)));
        }
        Ok(m)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CellRecord> {
        self.cell.iter().filter(|c| c.status != "ok")
    }
}

/// What a finished experiment left on disk.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    /// Final-snapshot summary per successful cell, grid order.
    pub finals: Vec<(Cell, MetricsTable)>,
}

/// Resolves the output directory: explicit path, else `$CIL_OUTPUT_DIR`,
/// else `./cil-out`.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("cil-out"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct CellOutcome {
    record: CellRecord,
    table: Option<MetricsTable>,
}

fn run_cell(config: &RunConfig, seq: &TaskSequence, cell: &Cell, out_dir: &Path) -> CellOutcome {
    let rel = PathBuf::from("cells").join(cell.name());
    let mut record = CellRecord {
        loss: cell.loss,
        memory: cell.memory,
        seed: cell.seed,
        status: "ok".into(),
        error: None,
        predictions: rel.join("predictions.csv"),
        metrics: rel.join("metrics.csv"),
        memory_manifest: rel.join("memory.txt"),
        train_seconds: 0.0,
        metrics_seconds: 0.0,
    };
    let result = (|| -> Result<MetricsTable> {
        create_dir(&out_dir.join(&rel))?;
        let started = Instant::now();
        let run = run_sequence(seq, &config.experiment(cell))?;
        record.train_seconds = started.elapsed().as_secs_f64();
        run.log.write(&out_dir.join(&record.predictions))?;
        write(&out_dir.join(&record.memory_manifest), &run.buffer.manifest())?;
        let started = Instant::now();
        let table = MetricsTable::compute(&run.log)?;
        table.write_csv(&out_dir.join(&record.metrics))?;
        record.metrics_seconds = started.elapsed().as_secs_f64();
        Ok(table)
    })();
    match result {
        Ok(table) => CellOutcome {
            record,
            table: Some(table),
        },
        Err(e) => {
            record.status = "failed".into();
            record.error = Some(e.to_string());
            CellOutcome { record, table: None }
        }
    }
}

/// Runs every cell of `config`, writes all artifacts and the manifest.
/// `base_dir` resolves relative dataset paths. Cell failures are recorded in
/// the manifest and reported as an error after everything else is written.
pub fn run_experiment(config: &RunConfig, base_dir: &Path, out_dir: &Path) -> Result<ExperimentOutput> {
    run_grid(config, base_dir, out_dir, false)
}

/// Runs `config` once per memory budget (replacing `grid.memory`) and adds
/// `sweep.csv` with the final-snapshot metrics of every (loss, budget).
pub fn sweep_memory(
    config: &RunConfig,
    budgets: &[MemoryMode],
    base_dir: &Path,
    out_dir: &Path,
) -> Result<ExperimentOutput> {
    if budgets.is_empty() {
        return Err(Error::Config("sweep needs at least one budget".into()));
    }
    let mut config = config.clone();
    config.grid.memory = budgets.to_vec();
    config.validate()?;
    run_grid(&config, base_dir, out_dir, true)
}

fn run_grid(config: &RunConfig, base_dir: &Path, out_dir: &Path, sweep: bool) -> Result<ExperimentOutput> {
    config.validate()?;
    // the stored copy is location independent, so `run --config <out>/config.toml` reruns it
    let config = &RunConfig {
        dataset: config.dataset.resolved(base_dir)?,
        ..config.clone()
    };
    let started = Instant::now();
    let seq = config.dataset.build(base_dir)?;
    let dataset_seconds = started.elapsed().as_secs_f64();

    create_dir(out_dir)?;
    write(&out_dir.join("config.toml"), &config.to_toml())?;
    let seq_manifest = SequenceManifest::from_sequence(&seq, config.dataset.clone());
    seq_manifest.write(&out_dir.join("sequence.toml"))?;

    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    let outcomes: Vec<CellOutcome> =
        pool.install(|| cells.par_iter().map(|c| run_cell(config, &seq, c, out_dir)).collect());

    let finals: Vec<(Cell, MetricsTable)> = cells
        .iter()
        .zip(&outcomes)
        .filter_map(|(c, o)| o.table.clone().map(|t| (*c, t)))
        .collect();
    write(&out_dir.join("aggregate.csv"), &aggregate_csv(config, &finals))?;
    if sweep {
        write(&out_dir.join("sweep.csv"), &sweep_csv(config, &finals))?;
    }

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        config_sha256: config.hash(),
        dataset_fingerprint: seq_manifest.fingerprint.clone(),
        seeds: config.grid.seeds.clone(),
        config: "config.toml".into(),
        sequence: "sequence.toml".into(),
        aggregate: "aggregate.csv".into(),
        sweep: sweep.then(|| "sweep.csv".into()),
        dataset_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
        cell: outcomes.into_iter().map(|o| o.record).collect(),
    };
    let manifest_path = out_dir.join("manifest.toml");
    write(
        &manifest_path,
        &toml::to_string(&manifest).expect("manifest is always serializable"),
    )?;
    let failed: Vec<String> = manifest
        .failed()
        .map(|c| format!("{}: {}", Cell { loss: c.loss, memory: c.memory, seed: c.seed }.name(), c.error.as_deref().unwrap_or("")))
        .collect();
    if !failed.is_empty() {
        return Err(Error::Run(format!(
            "{} of {} cells failed (see {}): {}",
            failed.len(),
            manifest.cell.len(),
            manifest_path.display(),
            failed.join("; ")
        )));
    }
    Ok(ExperimentOutput {
        out_dir: out_dir.to_path_buf(),
        manifest,
        finals,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn group<'a>(
    config: &RunConfig,
    finals: &'a [(Cell, MetricsTable)],
) -> Vec<(LossKind, MemoryMode, Vec<&'a MetricsTable>)> {
    let mut out = Vec::new();
    for &loss in &config.grid.losses {
        for &memory in &config.grid.memory {
            let tables: Vec<&MetricsTable> = finals
                .iter()
                .filter(|(c, _)| c.loss == loss && c.memory == memory)
                .map(|(_, t)| t)
                .collect();
            if !tables.is_empty() {
                out.push((loss, memory, tables));
            }
        }
    }
    out
}

pub const AGGREGATE_CSV_HEADER: &str = "loss,memory,t,n_seeds,A_mean,A_std,F_mean,F_std,F_cumulative_mean,F_cumulative_std,A_taw_mean,A_taw_std,A_tinf_mean,A_tinf_std";

fn push_stat(out: &mut String, values: Option<Vec<f64>>) {
    match values {
        Some(v) => {
            let (m, s) = mean_std(&v);
            let _ = write!(out, ",{m:?},{s:?}");
        }
        None => out.push_str(",,"),
    }
}

fn aggregate_csv(config: &RunConfig, finals: &[(Cell, MetricsTable)]) -> String {
    let mut out = String::from(AGGREGATE_CSV_HEADER);
    out.push('\n');
    for (loss, memory, tables) in group(config, finals) {
        let n_t = tables.iter().map(|t| t.summaries.len()).min().unwrap_or(0);
        for i in 0..n_t {
            let rows: Vec<_> = tables.iter().map(|t| &t.summaries[i]).collect();
            let _ = write!(out, "{},{},{},{}", loss.label(), memory.label(), rows[0].t, rows.len());
            push_stat(&mut out, Some(rows.iter().map(|r| r.a).collect()));
            push_stat(&mut out, rows.iter().map(|r| r.f).collect());
            push_stat(&mut out, rows.iter().map(|r| r.f_cumulative).collect());
            push_stat(&mut out, Some(rows.iter().map(|r| r.a_taw).collect()));
            push_stat(&mut out, Some(rows.iter().map(|r| r.a_tinf).collect()));
            out.push('\n');
        }
    }
    out
}

pub const SWEEP_CSV_HEADER: &str =
    "loss,memory,n_seeds,A_mean,A_std,A_taw_mean,A_taw_std,A_tinf_mean,A_tinf_std";

fn sweep_csv(config: &RunConfig, finals: &[(Cell, MetricsTable)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (loss, memory, tables) in group(config, finals) {
        let rows: Vec<_> = tables.iter().map(|t| t.last()).collect();
        let _ = write!(out, "{},{},{}", loss.label(), memory.label(), rows.len());
        push_stat(&mut out, Some(rows.iter().map(|r| r.a).collect()));
        push_stat(&mut out, Some(rows.iter().map(|r| r.a_taw).collect()));
        push_stat(&mut out, Some(rows.iter().map(|r| r.a_tinf).collect()));
        out.push('\n');
    }
    out
}

/// Reads a prediction log (possibly produced elsewhere) and writes its
/// metric table for snapshots `1..=t` (all snapshots when `t` is `None`).
pub fn compute_metrics_from_log(log_path: &Path, t: Option<usize>, out: &Path) -> Result<MetricsTable> {
    let log = PredictionLog::read(log_path)?;
    let table = match t {
        Some(t) => MetricsTable::compute_until(&log, t)?,
        None => MetricsTable::compute(&log)?,
    };
    table.write_csv(out)?;
    Ok(table)
}
