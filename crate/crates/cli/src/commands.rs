//! The subcommands, minus argument parsing.

use std::path::{Path, PathBuf};

use log::{info, warn};
use polydreg::data::load_csv;
use polydreg::linalg::Matrix;
use polydreg::metrics::{tail_ratio, GradTarget};
use polydreg::train::{accuracy, TrainLog};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{config_hash, load_dataset, prepare, run_cell, ResultRow};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{load_plan, load_run_config, Comparison, ConfigError, RunConfig, SchemaKind};
use crate::report::{compute_stats, render_text, StatsReport, TailRatioFile, REPORT_VERSION};
use crate::sweep::{read_results, SweepError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const RESULT_FILE: &str = "result.json";
pub const TAILRATIO_FILE: &str = "tailratio.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] polydreg::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("dataset does not match the checkpoint: {0}")]
    SchemaMismatch(String),
    #[error("cell {cell} failed: {message}")]
    CellFailed { cell: String, message: String },
    #[error("unpaired cells:\n  {}", .0.join("\n  "))]
    Unpaired(Vec<String>),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// `model:fraction:seed`.
pub fn parse_cell(text: &str) -> Result<(String, f64, u64)> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::Usage(format!("--cell expects model:fraction:seed, got '{text}'"));
    if parts.len() != 3 || parts[0].is_empty() {
        return Err(bad());
    }
    let fraction = parts[1].parse().map_err(|_| bad())?;
    let seed = parts[2].parse().map_err(|_| bad())?;
    Ok((parts[0].to_string(), fraction, seed))
}

/// `model_a:model_b:metric`.
pub fn parse_comparison(text: &str) -> Result<Comparison> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("--compare expects model_a:model_b:metric, got '{text}'")));
    }
    Ok(Comparison::parse(parts[0], parts[1], parts[2])?)
}

/// Where a training run comes from: a run file, or one cell of a plan.
pub enum RunSource<'a> {
    Config(&'a Path),
    PlanCell { plan: &'a Path, cell: &'a str },
}

pub fn resolve_run(source: RunSource<'_>, seed: Option<u64>) -> Result<(RunConfig, String)> {
    let (mut cfg, id) = match source {
        RunSource::Config(path) => {
            let cfg = load_run_config(path)?;
            let id = cfg.model.id.clone().unwrap_or_else(|| cfg.model.kind().name().to_string());
            (cfg, id)
        }
        RunSource::PlanCell { plan, cell } => {
            let plan = load_plan(plan)?;
            let (id, fraction, s) = parse_cell(cell)?;
            (plan.cell(&id, fraction, s)?, id)
        }
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok((cfg, id))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLogFile {
    pub format_version: u32,
    pub model_id: String,
    pub config_hash: String,
    pub log: TrainLog,
}

pub struct TrainOutput {
    pub row: ResultRow,
    pub checkpoint: Option<PathBuf>,
}

/// Trains one run and writes the checkpoint, the per-epoch log and the
/// result row into `out`. A diverged run still writes its row and log.
pub fn cmd_train(cfg: &RunConfig, model_id: &str, out: &Path) -> Result<TrainOutput> {
    create_dir(out)?;
    let raw = load_dataset(&cfg.dataset)?;
    let outcome = run_cell(&raw, cfg, model_id)?;
    let hash = config_hash(cfg)?;
    write_json(
        &out.join(TRAIN_LOG_FILE),
        &TrainLogFile { format_version: REPORT_VERSION, model_id: model_id.into(), config_hash: hash, log: outcome.log },
    )?;
    write_json(&out.join(RESULT_FILE), &outcome.row)?;
    let checkpoint = match outcome.model {
        Some(model) => {
            let path = out.join(CHECKPOINT_FILE);
            Checkpoint::for_cell(cfg, &raw, model_id, model, outcome.preprocessor)?.save(&path)?;
            Some(path)
        }
        None => None,
    };
    if let Some(e) = &outcome.row.error {
        return Err(CliError::CellFailed {
            cell: format!("{model_id}:{}:{}", cfg.run.fraction, cfg.run.seed),
            message: e.clone(),
        });
    }
    info!(
        "{model_id}: eval accuracy {:.4}, tau {:.4}",
        outcome.row.eval_accuracy.unwrap_or(f64::NAN),
        outcome.row.tau.unwrap_or(f64::NAN)
    );
    Ok(TrainOutput { row: outcome.row, checkpoint })
}

/// Data a checkpoint is evaluated on.
pub enum EvalData<'a> {
    /// The eval split of a run file, rebuilt exactly as in training.
    Config(&'a Path),
    /// Every row of a CSV file, transformed by the stored preprocessing.
    Csv(&'a Path),
}

fn check_features(ckpt: &Checkpoint, names: &[String]) -> Result<()> {
    if names != ckpt.feature_names.as_slice() {
        return Err(CliError::SchemaMismatch(format!(
            "checkpoint expects features {:?}, dataset has {:?}",
            ckpt.feature_names, names
        )));
    }
    Ok(())
}

/// Features (already preprocessed) and labels for evaluating `ckpt`.
pub fn eval_data(ckpt: &Checkpoint, source: EvalData<'_>) -> Result<(Matrix, Vec<usize>)> {
    match source {
        EvalData::Config(path) => {
            let cfg = load_run_config(path)?;
            if cfg.dataset.schema != ckpt.schema {
                return Err(CliError::SchemaMismatch(format!(
                    "checkpoint schema {:?}, config schema {:?}",
                    ckpt.schema, cfg.dataset.schema
                )));
            }
            let raw = load_dataset(&cfg.dataset)?;
            check_features(ckpt, &raw.feature_names)?;
            if config_hash(&cfg)? != ckpt.config_hash {
                warn!("{} differs from the config this checkpoint was trained with", path.display());
            }
            let prepared = prepare(&raw, &cfg)?;
            Ok(prepared.data.select(&prepared.split.eval))
        }
        EvalData::Csv(path) => {
            if ckpt.schema == SchemaKind::Blobs {
                warn!("checkpoint was trained on generated blobs; reading {} as a generic table", path.display());
            }
            let schema = match ckpt.schema {
                SchemaKind::Pima => polydreg::data::Schema::Pima,
                _ => polydreg::data::Schema::Generic,
            };
            let label = ckpt.label_column.as_deref().unwrap_or("label");
            let raw = load_csv(path, label, schema)?;
            check_features(ckpt, &raw.feature_names)?;
            if raw.class_count > ckpt.model.num_classes() {
                return Err(CliError::SchemaMismatch(format!(
                    "labels reach class {} but the model has {} classes",
                    raw.class_count - 1,
                    ckpt.model.num_classes()
                )));
            }
            Ok((ckpt.preprocessor.apply(&raw.features)?, raw.labels))
        }
    }
}

/// τ report of a checkpoint over `source`, written to `out` when given.
pub fn cmd_tailratio(ckpt: &Checkpoint, source: EvalData<'_>, target: GradTarget, out: Option<&Path>) -> Result<TailRatioFile> {
    let (x, y) = eval_data(ckpt, source)?;
    let norms = ckpt.model.grad_norms(&x, &y, target)?;
    let report = tail_ratio(&norms)?.labelled(ckpt.model_id.clone(), None, Some(ckpt.seed));
    let file = TailRatioFile::new(&report);
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(TAILRATIO_FILE), &file)?;
    }
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub model_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub tau: Option<f64>,
}

pub fn cmd_eval(ckpt: &Checkpoint, source: EvalData<'_>, out: Option<&Path>) -> Result<EvalReport> {
    let (x, y) = eval_data(ckpt, source)?;
    let acc = accuracy(&ckpt.model.logits(&x)?, &y);
    let tau = match ckpt.model.grad_norms(&x, &y, GradTarget::Loss).and_then(|n| tail_ratio(&n)) {
        Ok(r) => Some(r.tau),
        Err(e) => {
            warn!("tau unavailable: {e}");
            None
        }
    };
    let report = EvalReport { format_version: REPORT_VERSION, model_id: ckpt.model_id.clone(), n: y.len(), accuracy: acc, tau };
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(EVAL_FILE), &report)?;
    }
    Ok(report)
}

pub struct StatsInput<'a> {
    pub results: &'a Path,
    pub plan: Option<&'a Path>,
    pub compare: Vec<Comparison>,
    pub bonferroni_m: Option<usize>,
    pub out: &'a Path,
}

/// Paired tests over a results table. Writes `stats.json` and `stats.txt`;
/// cells that could not be paired are reported as an error afterwards.
pub fn cmd_stats(input: StatsInput<'_>) -> Result<StatsReport> {
    let rows = read_results(input.results)?;
    let (comparisons, fractions, seeds, plan_m) = match input.plan {
        Some(p) => {
            let plan = load_plan(p)?;
            let mut cmp = plan.comparisons.clone();
            cmp.extend(input.compare.iter().cloned());
            let m = if input.compare.is_empty() { Some(plan.family_size()) } else { None };
            (cmp, plan.split.data_fractions.clone(), plan.split.seeds.clone(), m)
        }
        None => (input.compare.clone(), Vec::new(), Vec::new(), None),
    };
    if comparisons.is_empty() {
        return Err(CliError::Usage("no comparisons: pass --plan or --compare a:b:metric".into()));
    }
    let n_fractions = if fractions.is_empty() {
        let mut f: Vec<u64> = rows.iter().map(|r| r.fraction.to_bits()).collect();
        f.sort_unstable();
        f.dedup();
        f.len().max(1)
    } else {
        fractions.len()
    };
    let m = input.bonferroni_m.or(plan_m).unwrap_or(comparisons.len() * n_fractions);
    if m == 0 {
        return Err(CliError::Usage("--bonferroni-m must be at least 1".into()));
    }
    let report = compute_stats(&rows, &comparisons, &fractions, &seeds, m);
    create_dir(input.out)?;
    write_json(&input.out.join(crate::sweep::STATS_JSON), &report)?;
    let txt = input.out.join(crate::sweep::STATS_TEXT);
    std::fs::write(&txt, render_text(&report)).map_err(|source| CliError::Io { path: txt, source })?;
    let missing = report.missing_cells();
    if !missing.is_empty() {
        return Err(CliError::Unpaired(missing));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_strings_parse() {
        assert_eq!(parse_cell("cr:0.25:3").unwrap(), ("cr".to_string(), 0.25, 3));
        for bad in ["cr:0.25", "cr:x:1", ":1:1", "cr:1:-1"] {
            assert!(matches!(parse_cell(bad), Err(CliError::Usage(_))), "{bad}");
        }
        assert!(parse_comparison("cr:vanilla:tau").is_ok());
        assert!(parse_comparison("cr:vanilla:speed").is_err());
    }
}
