use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_input_gradients, BaselineNet};
use crate::error::{arg_err, Error, Result};
use crate::linalg::{mean, quantile_sorted, Matrix};
use crate::polynet::{forward_dual, PolyNetwork};
use crate::tape::GradTape;
use crate::train::{RecordOptions, Trainable};

/// The tail quantile in `τ = p99 / mean`.
pub const TAIL_QUANTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRatioReport {
    pub norms: Vec<f64>,
    pub mean: f64,
    pub p99: f64,
    pub tau: f64,
    pub n: usize,
    pub model_id: String,
    pub fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl TailRatioReport {
    pub fn labelled(mut self, model_id: impl Into<String>, fraction: Option<f64>, seed: Option<u64>) -> Self {
        self.model_id = model_id.into();
        self.fraction = fraction;
        self.seed = seed;
        self
    }
}

/// `τ = quantile(norms, 0.99) / mean(norms)`.
pub fn tail_ratio(norms: &[f64]) -> Result<TailRatioReport> {
    if norms.is_empty() {
        return arg_err("tail ratio of an empty sequence");
    }
    if let Some(bad) = norms.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return arg_err(format!("gradient norms must be finite and nonnegative, found {bad}"));
    }
    let m = mean(norms);
    if m == 0.0 {
        return Err(Error::Degenerate("all gradient norms are zero; tau is undefined".into()));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = quantile_sorted(&sorted, TAIL_QUANTILE);
    // constant input: τ is exactly 1, even when the summed mean is an ulp off
    let tau = if sorted[0] == sorted[sorted.len() - 1] { 1.0 } else { p99 / m };
    Ok(TailRatioReport {
        norms: norms.to_vec(),
        mean: m,
        p99,
        tau,
        n: norms.len(),
        model_id: String::new(),
        fraction: None,
        seed: None,
    })
}

/// Which per-sample scalar is differentiated with respect to the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// The sample's cross-entropy loss.
    #[default]
    Loss,
    /// The logit of the sample's true class.
    TrueLogit,
}

/// Per-sample input gradients, one row per sample.
pub trait InputGradients {
    fn input_gradients(&self, x: &Matrix, labels: &[usize], target: GradTarget) -> Result<Matrix>;
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Composes the dual stream's head Jacobian with the loss-layer gradient;
/// no backward pass.
impl InputGradients for PolyNetwork {
    fn input_gradients(&self, x: &Matrix, labels: &[usize], target: GradTarget) -> Result<Matrix> {
        check_labels(x, labels, self.num_classes())?;
        let (logits, dual) = forward_dual(self, x)?;
        let d = self.input_dim();
        let classes = self.num_classes();
        let mut out = Matrix::zeros(x.rows(), d);
        for b in 0..x.rows() {
            let hj = dual.head_jacobian.sample_slice(b);
            let weights: Vec<f64> = match target {
                GradTarget::Loss => {
                    let mut p = softmax_row(logits.row(b));
                    p[labels[b]] -= 1.0;
                    p
                }
                GradTarget::TrueLogit => (0..classes).map(|c| if c == labels[b] { 1.0 } else { 0.0 }).collect(),
            };
            let row = out.row_mut(b);
            for (c, wc) in weights.iter().enumerate() {
                for (k, r) in row.iter_mut().enumerate() {
                    *r += wc * hj[c * d + k];
                }
            }
        }
        Ok(out)
    }
}

/// Reverse accumulation through the tape.
impl InputGradients for BaselineNet {
    fn input_gradients(&self, x: &Matrix, labels: &[usize], target: GradTarget) -> Result<Matrix> {
        check_labels(x, labels, self.num_classes())?;
        match target {
            GradTarget::Loss => baseline_input_gradients(self, x, labels),
            GradTarget::TrueLogit => {
                let mut tape = GradTape::new();
                let opts = RecordOptions {
                    dual: false,
                    include_head: false,
                    train_mode: false,
                    budget_bytes: usize::MAX,
                };
                let rec = self.record(&mut tape, x, opts, None)?;
                let mut onehot = Matrix::zeros(x.rows(), self.num_classes());
                for (b, &y) in labels.iter().enumerate() {
                    onehot.set(b, y, 1.0);
                }
                let mask = tape.leaf(onehot);
                let picked = tape.mul(rec.logits, mask)?;
                let root = tape.sum(picked)?;
                Ok(tape.backward(root).get_or_zeros(rec.input, x.rows(), x.cols()))
            }
        }
    }
}

fn check_labels(x: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if x.rows() == 0 {
        return arg_err("empty evaluation set");
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return arg_err(format!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

/// L2 norm of each sample's input gradient.
pub fn input_grad_norms<M: InputGradients + ?Sized>(
    model: &M,
    x: &Matrix,
    labels: &[usize],
    target: GradTarget,
) -> Result<Vec<f64>> {
    let g = model.input_gradients(x, labels, target)?;
    let mut norms = Vec::with_capacity(g.rows());
    for b in 0..g.rows() {
        let n = g.row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() {
            return Err(Error::NumericOverflow {
                context: format!("input gradient of sample {b}"),
            });
        }
        norms.push(n);
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_norms_give_unit_tau() {
        let r = tail_ratio(&[1.0; 4]).unwrap();
        assert_eq!(r.tau, 1.0);
        let r = tail_ratio(&[0.1; 7]).unwrap();
        assert_eq!(r.tau, 1.0);
        assert_eq!(tail_ratio(&[3.5]).unwrap().tau, 1.0);
    }

    #[test]
    fn one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = tail_ratio(&v).unwrap();
        assert!((r.p99 - 99.01).abs() < 1e-12);
        assert!((r.mean - 50.5).abs() < 1e-12);
        assert!((r.tau - 99.01 / 50.5).abs() < 1e-12);
        assert!((r.tau - 1.96059).abs() < 1e-5);
    }

    #[test]
    fn error_states() {
        assert!(matches!(tail_ratio(&[]), Err(Error::Argument(_))));
        assert!(matches!(tail_ratio(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(tail_ratio(&[1.0, -1.0]).is_err());
        assert!(tail_ratio(&[1.0, f64::INFINITY]).is_err());
    }
}
