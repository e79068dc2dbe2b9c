//! CSV ingestion, imputation and standardization, stratified 80/20 splits and
//! nested data-fraction subsampling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{Matrix, Rng};

pub const SPLIT_STREAM: u64 = 3;
pub const SUBSAMPLE_STREAM: u64 = 4;

/// Columns of the Pima file where a zero means "not measured":
/// Glucose, BloodPressure, SkinThickness, Insulin, BMI.
pub const PIMA_IMPUTE_COLUMNS: [usize; 5] = [1, 2, 3, 4, 5];
pub const PIMA_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    #[default]
    Generic,
    Pima,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_count: usize,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, feature_names: Vec<String>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return shape_err(format!("{} feature rows but {} labels", features.rows(), labels.len()));
        }
        if feature_names.len() != features.cols() {
            return shape_err(format!("{} names for {} features", feature_names.len(), features.cols()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return arg_err(format!("label {bad} outside [0, {class_count})"));
        }
        Ok(Self { features, labels, feature_names, class_count, standardization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.class_count)
    }

    /// Rows `idx` as (features, labels).
    pub fn select(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Reads a comma-separated file with a header row. Every column except
/// `label_column` becomes a feature; labels must be nonnegative integers.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, schema: Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse { row: 0, column: String::new(), message: "empty file or missing header".into() });
    }
    let Some(label_idx) = headers.iter().position(|h| h == label_column) else {
        return Err(Error::Parse {
            row: 0,
            column: label_column.to_string(),
            message: format!("label column not found; header is {headers:?}"),
        });
    };
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|(i, _)| *i != label_idx).map(|(_, h)| h.clone()).collect();
    if schema == Schema::Pima && feature_names.len() != PIMA_FEATURES {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("Pima schema expects {PIMA_FEATURES} feature columns, found {}", feature_names.len()),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("'{cell}' is not a finite number"),
            })?;
            if j == label_idx {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Parse {
                        row,
                        column: headers[j].clone(),
                        message: format!("label '{cell}' is not a nonnegative integer"),
                    });
                }
                labels.push(v as usize);
            } else {
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse { row: 0, column: String::new(), message: "file has no data rows".into() });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    if schema == Schema::Pima && class_count > 2 {
        return Err(Error::Parse { row: 0, column: label_column.into(), message: "Pima outcome must be 0 or 1".into() });
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, feature_names.len(), values)?;
    let ds = Dataset::new(features, labels, feature_names, class_count)?;
    log::info!("loaded {}: {} rows, {} features, class histogram {:?}", path.display(), n, ds.dim(), ds.class_histogram());
    Ok(ds)
}

/// Imputation and standardization statistics fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Per column: the value substituted for zeros, if that column is imputed.
    pub impute: Vec<Option<f64>>,
    pub standardization: Standardization,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl Preprocessor {
    /// Fits on `rows` of `features`. Zeros in `impute_columns` are replaced by
    /// the median of that column's nonzero training values; standardization
    /// uses the population standard deviation, with 1 substituted for
    /// constant columns.
    pub fn fit(features: &Matrix, rows: &[usize], impute_columns: &[usize]) -> Result<Self> {
        let d = features.cols();
        if rows.is_empty() {
            return arg_err("cannot fit preprocessing on zero rows");
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= features.rows()) {
            return arg_err(format!("row {bad} out of range"));
        }
        let mut impute = vec![None; d];
        for &c in impute_columns {
            if c >= d {
                return arg_err(format!("impute column {c} out of range for {d} features"));
            }
            let mut nonzero: Vec<f64> = rows.iter().map(|&r| features.get(r, c)).filter(|v| *v != 0.0).collect();
            if nonzero.is_empty() {
                log::warn!("column {c} has no nonzero training values; zeros kept");
                continue;
            }
            impute[c] = Some(median(&mut nonzero));
        }
        let mut fitted = Self { impute, standardization: Standardization { mean: vec![0.0; d], std: vec![1.0; d] } };
        let imputed = fitted.impute_rows(features, rows);
        let n = rows.len() as f64;
        for c in 0..d {
            let col: Vec<f64> = (0..rows.len()).map(|i| imputed.get(i, c)).collect();
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            fitted.standardization.mean[c] = m;
            fitted.standardization.std[c] = if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 };
        }
        Ok(fitted)
    }

    fn impute_rows(&self, features: &Matrix, rows: &[usize]) -> Matrix {
        let mut out = features.select_rows(rows);
        for i in 0..out.rows() {
            for (v, fill) in out.row_mut(i).iter_mut().zip(&self.impute) {
                if let Some(fill) = fill {
                    if *v == 0.0 {
                        *v = *fill;
                    }
                }
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.impute.len()
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return shape_err(format!("preprocessor fitted on {} features, got {}", self.dim(), features.cols()));
        }
        let all: Vec<usize> = (0..features.rows()).collect();
        let mut out = self.impute_rows(features, &all);
        let s = &self.standardization;
        for i in 0..out.rows() {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - s.mean[c]) / s.std[c];
            }
        }
        Ok(out)
    }

    /// The whole dataset transformed with these statistics.
    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: self.apply(&ds.features)?,
            standardization: Some(self.standardization.clone()),
            ..ds.clone()
        })
    }
}

/// Fits imputation (when `impute`) and standardization on `train_rows` and
/// applies them to every row.
pub fn preprocess_pima(ds: &Dataset, train_rows: &[usize], impute: bool) -> Result<(Dataset, Preprocessor)> {
    if ds.dim() != PIMA_FEATURES {
        return shape_err(format!("Pima preprocessing expects {PIMA_FEATURES} features, got {}", ds.dim()));
    }
    let cols: &[usize] = if impute { &PIMA_IMPUTE_COLUMNS } else { &[] };
    let pre = Preprocessor::fit(&ds.features, train_rows, cols)?;
    Ok((pre.transform(ds)?, pre))
}

/// Standardization only, for generic schemas.
pub fn preprocess(ds: &Dataset, train_rows: &[usize]) -> Result<(Dataset, Preprocessor)> {
    let pre = Preprocessor::fit(&ds.features, train_rows, &[])?;
    Ok((pre.transform(ds)?, pre))
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.25, 0.50, 1.00];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub eval_fraction: f64,
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { eval_fraction: 0.2, data_fractions: DEFAULT_FRACTIONS.to_vec(), seeds: (0..6).collect() }
    }
}

impl SplitPlan {
    pub fn train_fraction_of_full(&self) -> f64 {
        1.0 - self.eval_fraction
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return arg_err(format!("eval fraction {} outside (0, 1)", self.eval_fraction));
        }
        if self.data_fractions.is_empty() {
            return arg_err("no data fractions");
        }
        if let Some(f) = self.data_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return arg_err(format!("data fraction {f} outside (0, 1]"));
        }
        if self.seeds.is_empty() {
            return arg_err("no seeds");
        }
        Ok(())
    }

    /// Rounding for fraction `f`: ceiling at the plan's smallest fraction,
    /// nearest otherwise.
    pub fn rounding_for(&self, f: f64) -> Rounding {
        let smallest = self.data_fractions.iter().cloned().fold(f64::INFINITY, f64::min);
        if f == smallest && f < 1.0 {
            Rounding::Ceil
        } else {
            Rounding::Nearest
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    Nearest,
    Ceil,
}

impl Rounding {
    fn apply(self, x: f64) -> usize {
        // guard against 0.1·n style products landing an ulp above an integer
        let x = (x * 1e9).round() / 1e9;
        match self {
            Rounding::Nearest => x.round() as usize,
            Rounding::Ceil => x.ceil() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

fn class_members(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    members
}

/// Per-class eval counts: floor of the proportional quota, then the leftover
/// `round(eval_fraction·n) − Σ floors` seats go to the largest fractional
/// parts (lower class index first on ties).
fn largest_remainder(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = Rounding::Nearest.apply(fraction * n as f64);
    let quotas: Vec<f64> = sizes.iter().map(|&s| fraction * s as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[c] + 1 < sizes[c] {
            counts[c] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified train/eval partition. Index lists come back sorted.
pub fn stratified_split(labels: &[usize], class_count: usize, eval_fraction: f64, seed: u64) -> Result<Split> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return arg_err(format!("eval fraction {eval_fraction} outside (0, 1)"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return arg_err(format!("label {bad} outside [0, {class_count})"));
    }
    let mut members = class_members(labels, class_count);
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    if let Some((c, s)) = sizes.iter().enumerate().find(|(_, s)| **s < 2) {
        return arg_err(format!("class {c} has {s} samples; stratified splitting needs at least 2"));
    }
    let counts = largest_remainder(&sizes, eval_fraction);
    let mut rng = Rng::stream(seed, SPLIT_STREAM);
    let mut split = Split { train: Vec::new(), eval: Vec::new() };
    for (m, &k) in members.iter_mut().zip(&counts) {
        rng.shuffle(m);
        split.eval.extend_from_slice(&m[..k]);
        split.train.extend_from_slice(&m[k..]);
    }
    split.train.sort_unstable();
    split.eval.sort_unstable();
    Ok(split)
}

/// Stratified subsample of `train` holding `rounding(f·|train|)` indices.
///
/// Each class is shuffled once per seed; position `i` of a class of size
/// `n_c` gets key `(i + ½)/n_c`, and the subsample is the `k` smallest keys
/// overall. Smaller fractions are therefore prefixes of larger ones, and every
/// class count stays within one sample of its proportional share.
pub fn subsample_fraction(
    train: &[usize],
    labels: &[usize],
    f: f64,
    seed: u64,
    rounding: Rounding,
) -> Result<Vec<usize>> {
    if !(f > 0.0 && f <= 1.0) {
        return arg_err(format!("data fraction {f} outside (0, 1]"));
    }
    if f == 1.0 {
        return Ok(train.to_vec());
    }
    let classes = train.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in train {
        members[labels[i]].push(i);
    }
    let mut rng = Rng::stream(seed, SUBSAMPLE_STREAM);
    let mut keyed = Vec::with_capacity(train.len());
    for (c, m) in members.iter_mut().enumerate() {
        rng.shuffle(m);
        let nc = m.len() as f64;
        for (pos, &i) in m.iter().enumerate() {
            keyed.push(((pos as f64 + 0.5) / nc, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = rounding.apply(f * train.len() as f64).min(train.len());
    let mut out: Vec<usize> = keyed[..k].iter().map(|t| t.2).collect();
    let hist = histogram(&out.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
    if let Some(c) = (0..classes).find(|&c| !members[c].is_empty() && hist[c] == 0) {
        return arg_err(format!("fraction {f} leaves class {c} with no samples ({k} of {})", train.len()));
    }
    out.sort_unstable();
    Ok(out)
}

/// Two Gaussian blobs with unit noise and class means at ±3 in every
/// coordinate; half the samples in each class.
pub fn two_blobs(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 4 || d == 0 {
        return arg_err(format!("two_blobs needs n ≥ 4 and d ≥ 1, got n={n}, d={d}"));
    }
    let mut rng = Rng::new(seed);
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let centre = if y == 0 { -3.0 } else { 3.0 };
        for v in x.row_mut(i) {
            *v = centre + rng.normal();
        }
        labels.push(y);
    }
    let names = (0..d).map(|j| format!("x{j}")).collect();
    Dataset::new(x, labels, names, 2)
}

/// Writes features and a trailing `label` column with a header row.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_imputation_by_hand() {
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0], vec![4.0]]);
        let pre = Preprocessor::fit(&x, &[0, 1, 2], &[0]).unwrap();
        assert_eq!(pre.impute[0], Some(3.0));
        let s = &pre.standardization;
        // imputed column [3, 2, 4]: mean 3, population sd √(2/3)
        assert!((s.mean[0] - 3.0).abs() < 1e-15);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let off = Preprocessor::fit(&x, &[0, 1, 2], &[]).unwrap();
        assert_eq!(off.impute[0], None);
        assert!((off.standardization.mean[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_keeps_unit_scale() {
        let x = Matrix::from_rows(&[vec![5.0, 1.0], vec![5.0, 2.0]]);
        let pre = Preprocessor::fit(&x, &[0, 1], &[]).unwrap();
        assert_eq!(pre.standardization.std[0], 1.0);
        let out = pre.apply(&x).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn largest_remainder_rule() {
        // quotas 1.2 and 0.8, two seats: floors 1 + 0, leftover to class 1
        assert_eq!(largest_remainder(&[6, 4], 0.2), vec![1, 1]);
        assert_eq!(largest_remainder(&[500, 268], 0.2), vec![100, 54]);
    }

    #[test]
    fn split_small_class_rejected() {
        assert!(stratified_split(&[0, 0, 0, 1], 2, 0.2, 0).is_err());
    }

    #[test]
    fn rounding_guard() {
        assert_eq!(Rounding::Ceil.apply(0.1 * 30.0), 3);
        assert_eq!(Rounding::Ceil.apply(0.05 * 614.0), 31);
        assert_eq!(Rounding::Nearest.apply(0.05 * 614.0), 31);
        let plan = SplitPlan::default();
        assert_eq!(plan.rounding_for(0.05), Rounding::Ceil);
        assert_eq!(plan.rounding_for(0.5), Rounding::Nearest);
    }
}
