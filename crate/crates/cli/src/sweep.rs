//! Resumable fraction × seed sweeps.
//!
//! Workers pull cells from a shared queue and hand finished rows to the
//! calling thread, the only writer of the output files. Each row is
//! appended to `results.jsonl` and flushed before the next one, so a killed
//! sweep loses at most the line being written. `--resume` keeps every
//! complete row (failed cells included) and runs only what is missing.
//! When the last cell finishes the table is rewritten in plan order, which
//! makes the final bytes independent of worker count and interruption.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use log::{info, warn};
use polydreg::data::Dataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cell::{file_digest, hex, load_dataset, run_cell, CellStatus, ResultRow, RESULT_VERSION};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentPlan};
use crate::report::{compute_stats, render_text, StatsReport};

pub const SWEEP_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const RESULTS_CSV: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const MANIFEST_FILE: &str = "sweep.json";
pub const STATS_JSON: &str = "stats.json";
pub const STATS_TEXT: &str = "stats.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] polydreg::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("{0} already holds sweep results; pass --resume to continue them")]
    Exists(PathBuf),
    #[error("{0} was produced by a different plan or dataset")]
    PlanMismatch(PathBuf),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, SweepError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub resume: bool,
    /// Stop after this many new cells without finalizing, as a crash would.
    pub max_cells: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub plan_hash: String,
    pub cells: usize,
    pub models: Vec<String>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Timing {
    format_version: u32,
    model_id: String,
    fraction: f64,
    seed: u64,
    wall_time_seconds: f64,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub total: usize,
    pub reused: usize,
    pub ran: usize,
    pub failed: usize,
    /// False when `max_cells` stopped the sweep early.
    pub complete: bool,
    pub rows: Vec<ResultRow>,
    pub stats: Option<StatsReport>,
}

/// Hash of the plan text and the dataset file it points at.
pub fn plan_hash(plan: &ExperimentPlan) -> Result<String> {
    let mut h = Sha256::new();
    h.update(plan.source.as_bytes());
    if let Some(p) = &plan.dataset.path {
        h.update(file_digest(p)?.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

pub fn checkpoint_name(model_id: &str, fraction: f64, seed: u64) -> String {
    format!("{model_id}-f{fraction}-s{seed}.ckpt")
}

/// Reads a results table. A final line cut short by a crash is dropped;
/// any other malformed line is an error.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut rows = Vec::new();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches('\n');
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ResultRow>(line) {
            Ok(r) if raw.ends_with('\n') => {
                if r.format_version != RESULT_VERSION {
                    return Err(SweepError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("unsupported row format_version {}", r.format_version),
                    });
                }
                rows.push(r)
            }
            Ok(_) | Err(_) if i + 1 == lines.len() && !raw.ends_with('\n') => {
                warn!("{}: dropping truncated last line {}", path.display(), i + 1);
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => {
                return Err(SweepError::Corrupt { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
            }
        }
    }
    Ok(rows)
}

fn row_line(row: &ResultRow) -> String {
    let mut s = serde_json::to_string(row).expect("rows serialize");
    s.push('\n');
    s
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let text: String = rows.iter().map(row_line).collect();
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `stats.json` and `stats.txt` for a plan's rows.
pub fn write_stats(out: &Path, plan: &ExperimentPlan, rows: &[ResultRow]) -> Result<StatsReport> {
    let report = compute_stats(rows, &plan.comparisons, &plan.split.data_fractions, &plan.split.seeds, plan.family_size());
    let json = out.join(STATS_JSON);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&json, text).map_err(io_err(&json))?;
    let txt = out.join(STATS_TEXT);
    std::fs::write(&txt, render_text(&report)).map_err(io_err(&txt))?;
    Ok(report)
}

fn failed_row(plan: &ExperimentPlan, id: &str, fraction: f64, seed: u64, err: &polydreg::Error) -> ResultRow {
    ResultRow {
        format_version: RESULT_VERSION,
        model_id: id.to_string(),
        kind: plan.model(id).expect("cells come from the roster").kind(),
        fraction,
        seed,
        status: CellStatus::Failed,
        n_train: 0,
        n_eval: 0,
        param_count: 0,
        eval_accuracy: None,
        tau: None,
        mean_norm: None,
        p99_norm: None,
        final_task_loss: None,
        final_penalty: None,
        error: Some(err.to_string()),
    }
}

struct Finished {
    index: usize,
    row: ResultRow,
    checkpoint: Option<Checkpoint>,
    seconds: f64,
}

fn run_one(plan: &ExperimentPlan, raw: &Dataset, id: &str, fraction: f64, seed: u64) -> (ResultRow, Option<Checkpoint>) {
    let attempt = || -> polydreg::Result<(ResultRow, Option<Checkpoint>)> {
        let cfg = plan.cell(id, fraction, seed).map_err(|e| polydreg::Error::Argument(e.to_string()))?;
        let outcome = run_cell(raw, &cfg, id)?;
        let ckpt = match outcome.model {
            Some(m) => Some(Checkpoint::for_cell(&cfg, raw, id, m, outcome.preprocessor)?),
            None => None,
        };
        Ok((outcome.row, ckpt))
    };
    attempt().unwrap_or_else(|e| (failed_row(plan, id, fraction, seed, &e), None))
}

/// Runs (or continues) every cell of `plan` into `opts.out`.
pub fn run_sweep(plan: &ExperimentPlan, opts: &SweepOptions) -> Result<SweepSummary> {
    let out = &opts.out;
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(io_err(out))?;
    let results_path = out.join(RESULTS_FILE);
    let manifest_path = out.join(MANIFEST_FILE);

    let manifest = Manifest {
        format_version: SWEEP_VERSION,
        plan_hash: plan_hash(plan)?,
        cells: plan.cells().len(),
        models: plan.models.iter().map(|(id, _)| id.clone()).collect(),
        fractions: plan.split.data_fractions.clone(),
        seeds: plan.split.seeds.clone(),
    };
    let existing = read_results(&results_path)?;
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let old: Manifest = serde_json::from_str(&text)
            .map_err(|e| SweepError::Corrupt { path: manifest_path.clone(), line: e.line(), message: e.to_string() })?;
        if old.plan_hash != manifest.plan_hash {
            return Err(SweepError::PlanMismatch(out.clone()));
        }
    }
    if !existing.is_empty() && !opts.resume {
        return Err(SweepError::Exists(out.clone()));
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    let cells = plan.cells();
    let index: HashMap<(String, u64, u64), usize> =
        cells.iter().enumerate().map(|(i, (id, f, s))| ((id.clone(), f.to_bits(), *s), i)).collect();
    let mut done: Vec<Option<ResultRow>> = vec![None; cells.len()];
    for row in existing {
        match index.get(&row.key()) {
            Some(&i) if done[i].is_none() => done[i] = Some(row),
            Some(_) => warn!("duplicate row for {:?}; keeping the first", row.key()),
            None => warn!("row {:?} is not part of this plan; dropping it", row.key()),
        }
    }
    let reused = done.iter().filter(|r| r.is_some()).count();
    // Drop any truncated tail before appending.
    let kept: Vec<ResultRow> = done.iter().flatten().cloned().collect();
    write_rows(&results_path, &kept)?;

    let mut pending: Vec<usize> = (0..cells.len()).filter(|&i| done[i].is_none()).collect();
    if let Some(limit) = opts.max_cells {
        pending.truncate(limit);
    }
    info!("sweep: {} cells, {} already done, {} to run", cells.len(), reused, pending.len());

    let raw = if pending.is_empty() { None } else { Some(load_dataset(&plan.dataset)?) };
    let mut results = OpenOptions::new().append(true).open(&results_path).map_err(io_err(&results_path))?;
    let timings_path = out.join(TIMINGS_FILE);
    let mut timings: File =
        OpenOptions::new().create(true).append(true).open(&timings_path).map_err(io_err(&timings_path))?;

    let ran = pending.len();
    if let Some(raw) = &raw {
        let queue = Mutex::new(pending.iter().copied().collect::<VecDeque<usize>>());
        let workers = opts.workers.max(1).min(pending.len());
        let (tx, rx) = mpsc::channel::<Finished>();
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (queue, cells) = (&queue, &cells);
                scope.spawn(move || loop {
                    let Some(i) = queue.lock().expect("queue lock").pop_front() else { break };
                    let (id, f, s) = &cells[i];
                    let start = Instant::now();
                    let (row, checkpoint) = run_one(plan, raw, id, *f, *s);
                    let seconds = start.elapsed().as_secs_f64();
                    if tx.send(Finished { index: i, row, checkpoint, seconds }).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut received = 0;
            for fin in rx {
                received += 1;
                let (id, f, s) = &cells[fin.index];
                if let Some(ck) = &fin.checkpoint {
                    ck.save(&out.join(CHECKPOINT_DIR).join(checkpoint_name(id, *f, *s)))?;
                }
                results.write_all(row_line(&fin.row).as_bytes()).map_err(io_err(&results_path))?;
                results.flush().map_err(io_err(&results_path))?;
                let t = Timing { format_version: SWEEP_VERSION, model_id: id.clone(), fraction: *f, seed: *s, wall_time_seconds: fin.seconds };
                let line = serde_json::to_string(&t).expect("timings serialize");
                writeln!(timings, "{line}").map_err(io_err(&timings_path))?;
                match &fin.row.error {
                    Some(e) => warn!("[{received}/{ran}] {id} fraction {f} seed {s} failed: {e}"),
                    None => info!(
                        "[{received}/{ran}] {id} fraction {f} seed {s}: accuracy {:.4} tau {:.4} ({:.1}s)",
                        fin.row.eval_accuracy.unwrap_or(f64::NAN),
                        fin.row.tau.unwrap_or(f64::NAN),
                        fin.seconds
                    ),
                }
                done[fin.index] = Some(fin.row);
            }
            Ok(())
        })?;
    }

    let complete = done.iter().all(Option::is_some);
    let rows: Vec<ResultRow> = done.into_iter().flatten().collect();
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    let stats = if complete {
        write_rows(&results_path, &rows)?;
        write_csv(&out.join(RESULTS_CSV), &rows)?;
        let report = write_stats(out, plan, &rows)?;
        let missing = report.missing_cells();
        if !missing.is_empty() {
            warn!("stats: {} unpaired cells: {}", missing.len(), missing.join("; "));
        }
        Some(report)
    } else {
        None
    };
    Ok(SweepSummary { total: cells.len(), reused, ran, failed, complete, rows, stats })
}

/// Rows whose keys repeat; used to check a finished table.
pub fn duplicate_keys(rows: &[ResultRow]) -> Vec<(String, u64, u64)> {
    let mut seen = HashSet::new();
    rows.iter().map(ResultRow::key).filter(|k| !seen.insert(k.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelKind;

    fn row(seed: u64) -> ResultRow {
        ResultRow {
            format_version: 1,
            model_id: "cr".into(),
            kind: ModelKind::Cr,
            fraction: 0.5,
            seed,
            status: CellStatus::Ok,
            n_train: 1,
            n_eval: 1,
            param_count: 1,
            eval_accuracy: Some(1.0),
            tau: Some(1.0),
            mean_norm: Some(1.0),
            p99_norm: Some(1.0),
            final_task_loss: Some(0.0),
            final_penalty: Some(0.0),
            error: None,
        }
    }

    #[test]
    fn truncated_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut text = row_line(&row(0)) + &row_line(&row(1));
        text.push_str(&row_line(&row(2))[..20]);
        std::fs::write(&p, &text).unwrap();
        assert_eq!(read_results(&p).unwrap(), vec![row(0), row(1)]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        std::fs::write(&p, format!("{}garbage\n{}", row_line(&row(0)), row_line(&row(1)))).unwrap();
        match read_results(&p) {
            Err(SweepError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a corrupt-line error, got {other:?}"),
        }
    }

    #[test]
    fn duplicates_are_found() {
        assert_eq!(duplicate_keys(&[row(0), row(1), row(0)]).len(), 1);
    }
}
