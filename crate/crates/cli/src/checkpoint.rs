//! Line-oriented text checkpoints.
//!
//! Every real number is written as `{:.16e}` (17 significant digits), which
//! round-trips an `f64` exactly, so save → load → save reproduces the bytes.
//! Strings are JSON-quoted.

use std::fmt::Write as _;
use std::path::Path;

use polydreg::baselines::BaselineNet;
use polydreg::data::{Dataset, Preprocessor, Standardization};
use polydreg::linalg::Matrix;
use polydreg::polynet::{ActivationCoeffs, Dense, PolyLayer, PolyNetwork};
use thiserror::Error;

use crate::cell::{config_hash, AnyModel};
use crate::config::{ModelKind, RunConfig, SchemaKind};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "polydreg-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported checkpoint format_version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    pub kind: ModelKind,
    pub model: AnyModel,
    pub seed: u64,
    pub config_hash: String,
    pub schema: SchemaKind,
    pub label_column: Option<String>,
    pub feature_names: Vec<String>,
    pub preprocessor: Preprocessor,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn nums(vs: &[f64]) -> String {
    vs.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ")
}

fn write_matrix(out: &mut String, header: &str, m: &Matrix) {
    let _ = writeln!(out, "{header} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let _ = writeln!(out, "{}", nums(m.row(r)));
    }
}

fn schema_name(s: SchemaKind) -> &'static str {
    match s {
        SchemaKind::Pima => "pima",
        SchemaKind::Generic => "generic",
        SchemaKind::Blobs => "blobs",
    }
}

impl Checkpoint {
    /// Checkpoint of a model trained from `cfg` on `raw`.
    pub fn for_cell(
        cfg: &RunConfig,
        raw: &Dataset,
        model_id: &str,
        model: AnyModel,
        preprocessor: Preprocessor,
    ) -> polydreg::Result<Self> {
        Ok(Checkpoint {
            model_id: model_id.to_string(),
            kind: cfg.model.kind(),
            model,
            seed: cfg.run.seed,
            config_hash: config_hash(cfg)?,
            schema: cfg.dataset.schema,
            label_column: cfg.dataset.label_column.clone(),
            feature_names: raw.feature_names.clone(),
            preprocessor,
        })
    }

    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let q = |s: &str| serde_json::to_string(s).expect("strings serialize");
        let _ = writeln!(o, "{MAGIC}");
        let _ = writeln!(o, "format_version {CHECKPOINT_VERSION}");
        let _ = writeln!(o, "model_id {}", q(&self.model_id));
        let _ = writeln!(o, "kind {}", self.kind.name());
        let _ = writeln!(o, "input_dim {}", self.model.input_dim());
        let _ = writeln!(o, "num_classes {}", self.model.num_classes());
        let _ = writeln!(o, "seed {}", self.seed);
        let _ = writeln!(o, "config_hash {}", self.config_hash);
        let _ = writeln!(o, "schema {}", schema_name(self.schema));
        let label = self.label_column.as_deref().map(q).unwrap_or_else(|| "null".into());
        let _ = writeln!(o, "label_column {label}");
        let _ = writeln!(o, "feature_names {}", serde_json::to_string(&self.feature_names).expect("names serialize"));
        let impute: Vec<String> =
            self.preprocessor.impute.iter().map(|v| v.map(num).unwrap_or_else(|| "-".into())).collect();
        let _ = writeln!(o, "impute {}", impute.join(" "));
        let _ = writeln!(o, "mean {}", nums(&self.preprocessor.standardization.mean));
        let _ = writeln!(o, "std {}", nums(&self.preprocessor.standardization.std));
        match &self.model {
            AnyModel::Poly(net) => {
                let _ = writeln!(o, "hidden_layers {}", net.layers.len());
                for (l, layer) in net.layers.iter().enumerate() {
                    write_matrix(&mut o, &format!("layer {l} weights"), &layer.weights);
                    let _ = writeln!(o, "layer {l} bias {}", nums(&layer.bias));
                    write_matrix(&mut o, &format!("layer {l} coeffs"), layer.coeffs.table());
                }
                write_head(&mut o, &net.head);
            }
            AnyModel::Baseline(net) => {
                let _ = writeln!(o, "dropout_rate {}", num(net.dropout_rate));
                let _ = writeln!(o, "hidden_layers {}", net.layers.len());
                for (l, layer) in net.layers.iter().enumerate() {
                    write_matrix(&mut o, &format!("layer {l} weights"), &layer.weights);
                    let _ = writeln!(o, "layer {l} bias {}", nums(&layer.bias));
                }
                write_head(&mut o, &net.head);
            }
        }
        let _ = writeln!(o, "end");
        o
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut c = Cursor { lines: text.lines().collect(), pos: 0 };
        if c.next_line()? != MAGIC {
            return Err(c.err("not a polydreg checkpoint"));
        }
        let version: u32 = c.field("format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let model_id: String = c.json("model_id")?;
        let kind = match c.raw("kind")? {
            "cr" => ModelKind::Cr,
            "vanilla" => ModelKind::Vanilla,
            "dropout" => ModelKind::Dropout,
            "weight_decay" => ModelKind::WeightDecay,
            "relu_dreg" => ModelKind::ReluDreg,
            other => return Err(c.err(&format!("unknown model kind '{other}'"))),
        };
        let input_dim: usize = c.field("input_dim")?;
        let num_classes: usize = c.field("num_classes")?;
        let seed: u64 = c.field("seed")?;
        let config_hash = c.raw("config_hash")?.to_string();
        let schema = match c.raw("schema")? {
            "pima" => SchemaKind::Pima,
            "generic" => SchemaKind::Generic,
            "blobs" => SchemaKind::Blobs,
            other => return Err(c.err(&format!("unknown schema '{other}'"))),
        };
        let label_column: Option<String> = c.json("label_column")?;
        let feature_names: Vec<String> = c.json("feature_names")?;
        let impute = c
            .raw("impute")?
            .split_whitespace()
            .map(|t| if t == "-" { Ok(None) } else { t.parse().map(Some) })
            .collect::<Result<Vec<Option<f64>>, _>>()
            .map_err(|e| c.err(&format!("impute: {e}")))?;
        let mean = c.floats("mean")?;
        let std = c.floats("std")?;
        if impute.len() != input_dim || mean.len() != input_dim || std.len() != input_dim {
            return Err(c.err("preprocessor length differs from input_dim"));
        }
        let preprocessor = Preprocessor { impute, standardization: Standardization { mean, std } };

        let shape_err = |c: &Cursor, e: polydreg::Error| c.err(&e.to_string());
        let model = if kind.is_poly() {
            let n: usize = c.field("hidden_layers")?;
            let mut layers = Vec::with_capacity(n);
            for l in 0..n {
                let w = c.matrix(&format!("layer {l} weights"))?;
                let b = c.floats(&format!("layer {l} bias"))?;
                let t = c.matrix(&format!("layer {l} coeffs"))?;
                let coeffs = ActivationCoeffs::from_table(t).map_err(|e| shape_err(&c, e))?;
                layers.push(PolyLayer::new(w, b, coeffs).map_err(|e| shape_err(&c, e))?);
            }
            let head = c.head()?;
            AnyModel::Poly(PolyNetwork::from_parts(input_dim, layers, head).map_err(|e| shape_err(&c, e))?)
        } else {
            let rate: f64 = c.field("dropout_rate")?;
            let n: usize = c.field("hidden_layers")?;
            let mut layers = Vec::with_capacity(n);
            for l in 0..n {
                let w = c.matrix(&format!("layer {l} weights"))?;
                let b = c.floats(&format!("layer {l} bias"))?;
                layers.push(Dense::new(w, b).map_err(|e| shape_err(&c, e))?);
            }
            let head = c.head()?;
            AnyModel::Baseline(BaselineNet::from_parts(input_dim, layers, head, rate).map_err(|e| shape_err(&c, e))?)
        };
        if model.num_classes() != num_classes {
            return Err(c.err("head width differs from num_classes"));
        }
        if c.next_line()? != "end" {
            return Err(c.err("expected 'end'"));
        }
        Ok(Checkpoint { model_id, kind, model, seed, config_hash, schema, label_column, feature_names, preprocessor })
    }
}

fn write_head(o: &mut String, head: &Dense) {
    write_matrix(o, "head weights", &head.weights);
    let _ = writeln!(o, "head bias {}", nums(&head.bias));
}

struct Cursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: &str) -> CheckpointError {
        CheckpointError::Format { line: self.pos, message: message.to_string() }
    }

    fn next_line(&mut self) -> Result<&'a str, CheckpointError> {
        let line = self.lines.get(self.pos).copied().ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(line)
    }

    /// The rest of a line that starts with `key `.
    fn raw(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let line = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
            .ok_or_else(|| self.err(&format!("expected '{key}'")))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key)?;
        v.parse().map_err(|e: T::Err| self.err(&format!("{key}: {e}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let v = self.raw(key)?;
        serde_json::from_str(v).map_err(|e| self.err(&format!("{key}: {e}")))
    }

    fn parse_floats(&self, s: &str) -> Result<Vec<f64>, CheckpointError> {
        s.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(&format!("'{t}': {e}"))))
            .collect()
    }

    fn floats(&mut self, key: &str) -> Result<Vec<f64>, CheckpointError> {
        let v = self.raw(key)?;
        self.parse_floats(v)
    }

    fn matrix(&mut self, key: &str) -> Result<Matrix, CheckpointError> {
        let dims = self.raw(key)?;
        let mut it = dims.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(rows)), Some(Ok(cols)), None) = (it.next(), it.next(), it.next()) else {
            return Err(self.err(&format!("{key}: expected 'rows cols'")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next_line()?;
            let row = self.parse_floats(line)?;
            if row.len() != cols {
                return Err(self.err(&format!("{key}: row has {} values, expected {cols}", row.len())));
            }
            data.extend(row);
        }
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err(&e.to_string()))
    }

    fn head(&mut self) -> Result<Dense, CheckpointError> {
        let w = self.matrix("head weights")?;
        let b = self.floats("head bias")?;
        Dense::new(w, b).map_err(|e| self.err(&e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use polydreg::linalg::Rng;

    fn sample(model: AnyModel, kind: ModelKind) -> Checkpoint {
        let d = model.input_dim();
        Checkpoint {
            model_id: "m \"1\"".into(),
            kind,
            model,
            seed: 7,
            config_hash: "abc123".into(),
            schema: SchemaKind::Generic,
            label_column: Some("y".into()),
            feature_names: (0..d).map(|i| format!("f {i}")).collect(),
            preprocessor: Preprocessor {
                impute: (0..d).map(|i| if i == 0 { Some(0.1) } else { None }).collect(),
                standardization: Standardization { mean: vec![-0.0; d], std: vec![1.0 / 3.0; d] },
            },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = Rng::new(1);
        let poly = PolyNetwork::new(3, &[4, 2], 2, &mut rng).unwrap();
        let base = BaselineNet::new(3, &[5], 3, 0.2, &mut rng).unwrap();
        for (m, k) in [(AnyModel::Poly(poly), ModelKind::Cr), (AnyModel::Baseline(base), ModelKind::Dropout)] {
            let ck = sample(m, k);
            let text = ck.to_text();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(Checkpoint::from_text("hello").is_err());
        let mut rng = Rng::new(2);
        let ck = sample(AnyModel::Poly(PolyNetwork::new(2, &[2], 2, &mut rng).unwrap()), ModelKind::Cr);
        let text = ck.to_text().replace("format_version 1", "format_version 9");
        assert!(matches!(Checkpoint::from_text(&text), Err(CheckpointError::Version(9))));
        let truncated: String = ck.to_text().lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
    }
}
