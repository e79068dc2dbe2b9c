//! One (model, fraction, seed) run, shared by `train` and `sweep`.

use std::path::Path;

use polydreg::baselines::BaselineNet;
use polydreg::data::{
    load_csv, preprocess, preprocess_pima, stratified_split, subsample_fraction, two_blobs, Dataset, Preprocessor,
    Schema, Split,
};
use polydreg::linalg::{Matrix, Rng};
use polydreg::metrics::{input_grad_norms, tail_ratio, GradTarget, InputGradients, TailRatioReport};
use polydreg::polynet::PolyNetwork;
use polydreg::train::{accuracy, train, Batch, TrainLog, Trainable, INIT_STREAM};
use polydreg::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSection, ModelKind, RunConfig, SchemaKind};

/// A trained model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Poly(PolyNetwork),
    Baseline(BaselineNet),
}

impl AnyModel {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            AnyModel::Poly(n) => n.logits(x),
            AnyModel::Baseline(n) => n.logits(x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            AnyModel::Poly(n) => n.input_dim(),
            AnyModel::Baseline(n) => n.input_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            AnyModel::Poly(n) => n.num_classes(),
            AnyModel::Baseline(n) => n.num_classes(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            AnyModel::Poly(n) => n.num_params(),
            AnyModel::Baseline(n) => n.num_params(),
        }
    }

    pub fn grad_norms(&self, x: &Matrix, labels: &[usize], target: GradTarget) -> Result<Vec<f64>> {
        match self {
            AnyModel::Poly(n) => input_grad_norms(n, x, labels, target),
            AnyModel::Baseline(n) => input_grad_norms(n, x, labels, target),
        }
    }

    pub fn input_gradients(&self, x: &Matrix, labels: &[usize], target: GradTarget) -> Result<Matrix> {
        match self {
            AnyModel::Poly(n) => n.input_gradients(x, labels, target),
            AnyModel::Baseline(n) => n.input_gradients(x, labels, target),
        }
    }
}

/// Raw (unprocessed) dataset named by a config section.
pub fn load_dataset(ds: &DatasetSection) -> Result<Dataset> {
    match ds.schema {
        SchemaKind::Blobs => two_blobs(ds.samples.unwrap_or(200), ds.dim.unwrap_or(2), ds.data_seed.unwrap_or(0)),
        SchemaKind::Pima | SchemaKind::Generic => {
            let path = ds.path.as_ref().ok_or_else(|| Error::Argument("dataset.path is required".into()))?;
            let label = ds.label_column.as_deref().unwrap_or("label");
            let schema = if ds.schema == SchemaKind::Pima { Schema::Pima } else { Schema::Generic };
            load_csv(path, label, schema)
        }
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance hash of a run: the resolved config without the dataset's
/// location, plus the dataset file's own digest.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut anon = cfg.clone();
    let data_digest = match &cfg.dataset.path {
        Some(p) => file_digest(p)?,
        None => String::new(),
    };
    anon.dataset.path = None;
    let mut h = Sha256::new();
    h.update(anon.to_toml().as_bytes());
    h.update(data_digest.as_bytes());
    Ok(hex(&h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

pub const RESULT_VERSION: u32 = 1;

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub format_version: u32,
    pub model_id: String,
    pub kind: ModelKind,
    pub fraction: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub n_train: usize,
    pub n_eval: usize,
    pub param_count: usize,
    pub eval_accuracy: Option<f64>,
    pub tau: Option<f64>,
    pub mean_norm: Option<f64>,
    pub p99_norm: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub final_penalty: Option<f64>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn key(&self) -> (String, u64, u64) {
        (self.model_id.clone(), self.fraction.to_bits(), self.seed)
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// Everything a finished cell produced.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub model: Option<AnyModel>,
    pub log: TrainLog,
    pub preprocessor: Preprocessor,
    pub tail: Option<TailRatioReport>,
}

/// Prepared data of a cell: transformed features plus the row sets.
pub struct CellData {
    pub data: Dataset,
    pub preprocessor: Preprocessor,
    pub split: Split,
    pub train_rows: Vec<usize>,
}

/// Split, subsample, then fit preprocessing on the subsample only.
pub fn prepare(raw: &Dataset, cfg: &RunConfig) -> Result<CellData> {
    let split = stratified_split(&raw.labels, raw.class_count, cfg.split.eval_fraction, cfg.run.seed)?;
    let train_rows =
        subsample_fraction(&split.train, &raw.labels, cfg.run.fraction, cfg.run.seed, cfg.run.rounding.into())?;
    let (data, preprocessor) = match cfg.dataset.schema {
        SchemaKind::Pima => preprocess_pima(raw, &train_rows, cfg.dataset.impute)?,
        _ => preprocess(raw, &train_rows)?,
    };
    Ok(CellData { data, preprocessor, split, train_rows })
}

/// Freshly initialized model of the configured kind.
pub fn init_model(cfg: &RunConfig, input_dim: usize, classes: usize) -> Result<AnyModel> {
    let m = &cfg.model;
    let mut rng = Rng::stream(cfg.run.seed, INIT_STREAM);
    if m.kind().is_poly() {
        let widths = m.widths.as_deref().unwrap_or(&[16, 16]);
        Ok(AnyModel::Poly(PolyNetwork::new(input_dim, widths, classes, &mut rng)?))
    } else {
        let widths = m.baseline_widths.as_deref().or(m.widths.as_deref()).unwrap_or(&[16, 16]);
        let dropout = m.dropout_rate.unwrap_or(0.0);
        Ok(AnyModel::Baseline(BaselineNet::new(input_dim, widths, classes, dropout, &mut rng)?))
    }
}

/// Trains one cell on an already loaded raw dataset and measures it on the
/// eval split. Training failures become a failed row, not an error.
pub fn run_cell(raw: &Dataset, cfg: &RunConfig, model_id: &str) -> Result<CellOutcome> {
    let prepared = prepare(raw, cfg)?;
    let (xtr, ytr) = prepared.data.select(&prepared.train_rows);
    let (xev, yev) = prepared.data.select(&prepared.split.eval);
    let model = init_model(cfg, raw.dim(), raw.class_count)?;
    let tcfg = cfg.model.train_config(cfg.run.seed).map_err(|e| Error::Argument(e.to_string()))?;
    let mut row = ResultRow {
        format_version: RESULT_VERSION,
        model_id: model_id.to_string(),
        kind: cfg.model.kind(),
        fraction: cfg.run.fraction,
        seed: cfg.run.seed,
        status: CellStatus::Ok,
        n_train: prepared.train_rows.len(),
        n_eval: prepared.split.eval.len(),
        param_count: model.num_params(),
        eval_accuracy: None,
        tau: None,
        mean_norm: None,
        p99_norm: None,
        final_task_loss: None,
        final_penalty: None,
        error: None,
    };
    let train_set = Batch { x: &xtr, labels: &ytr };
    let eval_set = Batch { x: &xev, labels: &yev };
    let trained = match model {
        AnyModel::Poly(n) => train(n, train_set, eval_set, &tcfg).map(|t| (AnyModel::Poly(t.model), t.log)),
        AnyModel::Baseline(n) => train(n, train_set, eval_set, &tcfg).map(|t| (AnyModel::Baseline(t.model), t.log)),
    };
    let (model, log) = match trained {
        Ok(t) => t,
        Err(e @ (Error::Diverged { .. } | Error::NumericOverflow { .. } | Error::MemoryBudget { .. })) => {
            row.status = CellStatus::Failed;
            row.error = Some(e.to_string());
            return Ok(CellOutcome { row, model: None, log: TrainLog::default(), preprocessor: prepared.preprocessor, tail: None });
        }
        Err(e) => return Err(e),
    };
    if let Some(last) = log.last() {
        row.final_task_loss = Some(last.task_loss);
        row.final_penalty = Some(last.penalty);
    }
    let measured = model
        .logits(&xev)
        .map(|l| accuracy(&l, &yev))
        .and_then(|acc| Ok((acc, tail_ratio(&model.grad_norms(&xev, &yev, GradTarget::Loss)?)?)));
    let tail = match measured {
        Ok((acc, tail)) => {
            row.eval_accuracy = Some(acc);
            row.tau = Some(tail.tau);
            row.mean_norm = Some(tail.mean);
            row.p99_norm = Some(tail.p99);
            Some(tail.labelled(model_id, Some(cfg.run.fraction), Some(cfg.run.seed)))
        }
        Err(e) => {
            row.status = CellStatus::Failed;
            row.error = Some(e.to_string());
            None
        }
    };
    Ok(CellOutcome { row, model: Some(model), log, preprocessor: prepared.preprocessor, tail })
}
