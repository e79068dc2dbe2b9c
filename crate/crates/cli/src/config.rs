//! Run and plan files.
//!
//! Both are TOML. Keys are fixed; an unknown key is an error that names it.
//!
//! A run file describes one training cell:
//!
//! ```toml
//! format_version = 1
//!
//! [dataset]
//! schema = "pima"            # pima | generic | blobs
//! path = "../data/pima-indians-diabetes.csv"   # relative to this file
//! label_column = "Outcome"
//! impute = true              # pima only: zeros in 5 columns are missing
//!
//! [split]
//! eval_fraction = 0.2
//!
//! [model]
//! kind = "cr"                # cr | vanilla | dropout | weight_decay | relu_dreg
//! widths = [16, 16]          # polynomial widths; baselines match their parameter count
//! lambda_dreg = 0.1
//!
//! [run]
//! fraction = 1.0
//! seed = 0
//! rounding = "nearest"       # nearest | ceil
//! ```
//!
//! A plan file has the same `[dataset]`, a `[split]` with `fractions` and
//! `seeds`, a `[defaults]` table of model keys, one `[[models]]` entry per
//! roster model (with an `id`), and `comparisons = [["cr", "vanilla", "tau"], ...]`.

use std::path::{Path, PathBuf};

use polydreg::baselines::matched_capacity;
use polydreg::data::{Rounding, SplitPlan, DEFAULT_FRACTIONS};
use polydreg::train::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for key '{key}': {message}")]
    Invalid { key: String, message: String },
    #[error("unsupported format_version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Pima,
    Generic,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub schema: SchemaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default = "yes")]
    pub impute: bool,
    /// Blob schema: sample count, dimension, generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

fn yes() -> bool {
    true
}

impl DatasetSection {
    fn validate(&self) -> Result<()> {
        match self.schema {
            SchemaKind::Blobs => {
                if self.samples.is_none() || self.dim.is_none() {
                    return Err(invalid("dataset.samples", "blobs need dataset.samples and dataset.dim"));
                }
            }
            _ => {
                if self.path.is_none() {
                    return Err(invalid("dataset.path", "a CSV path is required for this schema"));
                }
                if self.label_column.is_none() {
                    return Err(invalid("dataset.label_column", "required for CSV data"));
                }
            }
        }
        Ok(())
    }

    /// Makes a relative path absolute against `base`.
    pub fn resolve(&mut self, base: &Path) {
        if let Some(p) = &self.path {
            if p.is_relative() {
                self.path = Some(base.join(p));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cr,
    Vanilla,
    Dropout,
    WeightDecay,
    ReluDreg,
}

impl ModelKind {
    pub fn is_poly(self) -> bool {
        self == ModelKind::Cr
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cr => "cr",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Dropout => "dropout",
            ModelKind::WeightDecay => "weight_decay",
            ModelKind::ReluDreg => "relu_dreg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Model and training keys. Every field is optional so the same table works
/// for plan defaults, roster entries and run files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Explicit baseline widths; otherwise matched to the polynomial model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_dreg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_include_head: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stopping_patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian_budget_mib: Option<usize>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ModelSection {
    /// Fields set in `top` win over `self`.
    pub fn overlaid(&self, top: &ModelSection) -> ModelSection {
        let mut out = self.clone();
        overlay!(
            out, top, id, kind, widths, baseline_widths, lambda_dreg, learning_rate, batch_size, epochs, optimizer,
            beta1, beta2, eps, weight_decay, dropout_rate, penalty_include_head, early_stopping_patience,
            jacobian_budget_mib
        );
        out
    }

    /// Settings implied by the model kind. Explicit keys in a roster entry
    /// still override them; plan defaults do not.
    fn kind_settings(kind: ModelKind) -> ModelSection {
        let mut s = ModelSection::default();
        match kind {
            ModelKind::Cr => {
                s.dropout_rate = Some(0.0);
            }
            ModelKind::Vanilla => {
                s.lambda_dreg = Some(0.0);
                s.dropout_rate = Some(0.0);
                s.weight_decay = Some(0.0);
            }
            ModelKind::Dropout => {
                s.lambda_dreg = Some(0.0);
                s.dropout_rate = Some(0.2);
                s.weight_decay = Some(0.0);
            }
            ModelKind::WeightDecay => {
                s.lambda_dreg = Some(0.0);
                s.dropout_rate = Some(0.0);
                s.weight_decay = Some(1e-4);
            }
            ModelKind::ReluDreg => {
                s.dropout_rate = Some(0.0);
                s.weight_decay = Some(0.0);
            }
        }
        s
    }

    /// Fully resolved: every field set, baseline widths matched.
    pub fn resolve(&self, defaults: &ModelSection, input_dim: usize, classes: usize) -> Result<ModelSection> {
        let kind = self.kind.ok_or_else(|| invalid("kind", "every model needs a kind"))?;
        let mut m = defaults.overlaid(&Self::kind_settings(kind)).overlaid(self);
        m.kind = Some(kind);
        let base = TrainConfig::default();
        let widths = m.widths.clone().unwrap_or_else(|| vec![16, 16]);
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid("widths", "widths must be a nonempty list of positive integers"));
        }
        if !kind.is_poly() && m.baseline_widths.is_none() {
            let matched = matched_capacity(input_dim, &widths, classes).map_err(|e| invalid("widths", e.to_string()))?;
            m.baseline_widths = Some(matched.widths);
        }
        if kind.is_poly() {
            m.baseline_widths = None;
        }
        m.widths = Some(widths);
        let (b1, b2, eps) = match base.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
            OptimizerKind::Sgd => unreachable!("default optimizer is adam"),
        };
        m.lambda_dreg.get_or_insert(base.lambda_dreg);
        m.learning_rate.get_or_insert(base.learning_rate);
        m.batch_size.get_or_insert(base.batch_size);
        m.epochs.get_or_insert(base.epochs);
        m.optimizer.get_or_insert(OptimizerName::Adam);
        m.beta1.get_or_insert(b1);
        m.beta2.get_or_insert(b2);
        m.eps.get_or_insert(eps);
        m.weight_decay.get_or_insert(base.weight_decay);
        m.dropout_rate.get_or_insert(base.dropout_rate);
        m.penalty_include_head.get_or_insert(base.penalty_include_head);
        m.jacobian_budget_mib.get_or_insert(base.jacobian_budget_bytes >> 20);
        m.train_config(0)?;
        Ok(m)
    }

    /// Training configuration of a resolved section.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let need = |v: Option<f64>, key: &str| v.ok_or_else(|| invalid(key, "unresolved"));
        let optimizer = match self.optimizer.unwrap_or(OptimizerName::Adam) {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: need(self.beta1, "beta1")?,
                beta2: need(self.beta2, "beta2")?,
                eps: need(self.eps, "eps")?,
            },
        };
        let cfg = TrainConfig {
            lambda_dreg: need(self.lambda_dreg, "lambda_dreg")?,
            learning_rate: need(self.learning_rate, "learning_rate")?,
            batch_size: self.batch_size.ok_or_else(|| invalid("batch_size", "unresolved"))?,
            epochs: self.epochs.ok_or_else(|| invalid("epochs", "unresolved"))?,
            optimizer,
            weight_decay: need(self.weight_decay, "weight_decay")?,
            dropout_rate: need(self.dropout_rate, "dropout_rate")?,
            seed,
            penalty_include_head: self.penalty_include_head.unwrap_or(false),
            early_stopping_patience: self.early_stopping_patience,
            jacobian_budget_bytes: self.jacobian_budget_mib.unwrap_or(512) << 20,
        };
        cfg.validate().map_err(|e| {
            let msg = e.to_string();
            let key = [
                "lambda_dreg",
                "learning_rate",
                "batch_size",
                "epochs",
                "weight_decay",
                "dropout_rate",
                "early_stopping_patience",
                "beta1",
            ]
            .into_iter()
            .find(|k| msg.contains(k))
            .unwrap_or("model");
            invalid(key, msg)
        })?;
        Ok(cfg)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind.expect("resolved model has a kind")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingName {
    #[default]
    Nearest,
    Ceil,
}

impl From<RoundingName> for Rounding {
    fn from(r: RoundingName) -> Self {
        match r {
            RoundingName::Nearest => Rounding::Nearest,
            RoundingName::Ceil => Rounding::Ceil,
        }
    }
}

impl From<Rounding> for RoundingName {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Nearest => RoundingName::Nearest,
            Rounding::Ceil => RoundingName::Ceil,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub rounding: RoundingName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSplitSection {
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.2
}

impl Default for CellSplitSection {
    fn default() -> Self {
        CellSplitSection { eval_fraction: default_eval_fraction() }
    }
}

/// One training run: what `train --config` reads and what a plan cell
/// resolves to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: CellSplitSection,
    pub model: ModelSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSplitSection {
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..6).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Lower is better.
    Tau,
    /// Higher is better.
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Tau => "tau",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub metric: Metric,
}

impl Comparison {
    pub fn parse(a: &str, b: &str, metric: &str) -> Result<Self> {
        let metric = match metric {
            "tau" => Metric::Tau,
            "accuracy" => Metric::Accuracy,
            other => return Err(invalid("comparisons", format!("unknown metric '{other}' (tau | accuracy)"))),
        };
        Ok(Comparison { model_a: a.into(), model_b: b.into(), metric })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format_version: u32,
    #[serde(default)]
    out: Option<PathBuf>,
    dataset: DatasetSection,
    #[serde(default = "default_plan_split")]
    split: PlanSplitSection,
    #[serde(default)]
    defaults: ModelSection,
    models: Vec<ModelSection>,
    #[serde(default)]
    comparisons: Vec<[String; 3]>,
    #[serde(default)]
    bonferroni_m: Option<usize>,
}

fn default_plan_split() -> PlanSplitSection {
    PlanSplitSection { eval_fraction: 0.2, fractions: default_fractions(), seeds: default_seeds() }
}

/// A validated sweep plan with every roster model resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub split: SplitPlan,
    pub models: Vec<(String, ModelSection)>,
    pub comparisons: Vec<Comparison>,
    pub bonferroni_m: Option<usize>,
    /// The plan file's bytes, hashed for provenance.
    pub source: String,
}

impl ExperimentPlan {
    pub fn model(&self, id: &str) -> Option<&ModelSection> {
        self.models.iter().find(|(m, _)| m == id).map(|(_, s)| s)
    }

    /// Family size for Bonferroni: the plan value, or one test per
    /// comparison per fraction.
    pub fn family_size(&self) -> usize {
        self.bonferroni_m.unwrap_or(self.comparisons.len() * self.split.data_fractions.len()).max(1)
    }

    /// The run configuration of one (model, fraction, seed) cell.
    pub fn cell(&self, model_id: &str, fraction: f64, seed: u64) -> Result<RunConfig> {
        let model = self.model(model_id).ok_or_else(|| invalid("models", format!("no model '{model_id}' in plan")))?;
        if !self.split.data_fractions.contains(&fraction) {
            return Err(invalid("split.fractions", format!("fraction {fraction} not in plan")));
        }
        Ok(RunConfig {
            format_version: FORMAT_VERSION,
            dataset: self.dataset.clone(),
            split: CellSplitSection { eval_fraction: self.split.eval_fraction },
            model: model.clone(),
            run: RunSection { fraction, seed, rounding: self.split.rounding_for(fraction).into() },
        })
    }

    /// All cells in roster, fraction, seed order.
    pub fn cells(&self) -> Vec<(String, f64, u64)> {
        let mut out = Vec::new();
        for (id, _) in &self.models {
            for &f in &self.split.data_fractions {
                for &s in &self.split.seeds {
                    out.push((id.clone(), f, s));
                }
            }
        }
        out
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(ConfigError::Version { found: v });
    }
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Input dimension and class count implied by a dataset section, needed
/// before the data is read to match baseline widths. Pima is fixed; other
/// schemas peek at the file.
pub fn dataset_shape(ds: &DatasetSection) -> std::result::Result<(usize, usize), polydreg::Error> {
    match ds.schema {
        SchemaKind::Blobs => Ok((ds.dim.unwrap_or(2), 2)),
        _ => {
            let data = crate::cell::load_dataset(ds)?;
            Ok((data.dim(), data.class_count))
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = read(path)?;
    let mut cfg: RunConfig = parse_toml(&text, path)?;
    check_version(cfg.format_version)?;
    cfg.dataset.validate()?;
    cfg.dataset.resolve(&base_dir(path));
    let (d, k) = dataset_shape(&cfg.dataset).map_err(|e| invalid("dataset", e.to_string()))?;
    cfg.model = cfg.model.resolve(&ModelSection::default(), d, k)?;
    if !(cfg.run.fraction > 0.0 && cfg.run.fraction <= 1.0) {
        return Err(invalid("run.fraction", format!("{} outside (0, 1]", cfg.run.fraction)));
    }
    if !(cfg.split.eval_fraction > 0.0 && cfg.split.eval_fraction < 1.0) {
        return Err(invalid("split.eval_fraction", "must lie in (0, 1)"));
    }
    Ok(cfg)
}

pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = read(path)?;
    let file: PlanFile = parse_toml(&text, path)?;
    check_version(file.format_version)?;
    let mut dataset = file.dataset.clone();
    dataset.validate()?;
    dataset.resolve(&base_dir(path));
    if file.defaults.id.is_some() {
        return Err(invalid("defaults.id", "ids belong to [[models]] entries"));
    }
    if file.defaults.kind.is_some() {
        return Err(invalid("defaults.kind", "kinds belong to [[models]] entries"));
    }
    let split = SplitPlan {
        eval_fraction: file.split.eval_fraction,
        data_fractions: file.split.fractions.clone(),
        seeds: file.split.seeds.clone(),
    };
    split.validate().map_err(|e| invalid("split", e.to_string()))?;
    if file.models.is_empty() {
        return Err(invalid("models", "the roster is empty"));
    }
    let (d, k) = dataset_shape(&dataset).map_err(|e| invalid("dataset", e.to_string()))?;
    let mut models = Vec::new();
    for (i, m) in file.models.iter().enumerate() {
        let id = m.id.clone().ok_or_else(|| invalid(&format!("models[{i}].id"), "missing"))?;
        if models.iter().any(|(other, _)| *other == id) {
            return Err(invalid(&format!("models[{i}].id"), format!("duplicate id '{id}'")));
        }
        let resolved = m.resolve(&file.defaults, d, k).map_err(|e| match e {
            ConfigError::Invalid { key, message } => invalid(&format!("models[{i}].{key}"), message),
            other => other,
        })?;
        models.push((id, resolved));
    }
    let mut comparisons = Vec::new();
    for c in &file.comparisons {
        let cmp = Comparison::parse(&c[0], &c[1], &c[2])?;
        for id in [&cmp.model_a, &cmp.model_b] {
            if !models.iter().any(|(m, _)| m == id) {
                return Err(invalid("comparisons", format!("'{id}' is not in the roster")));
            }
        }
        comparisons.push(cmp);
    }
    if file.bonferroni_m == Some(0) {
        return Err(invalid("bonferroni_m", "must be at least 1"));
    }
    Ok(ExperimentPlan {
        out: file.out.map(|o| if o.is_relative() { base_dir(path).join(o) } else { o }),
        dataset,
        split,
        models,
        comparisons,
        bonferroni_m: file.bonferroni_m,
        source: text,
    })
}
