//! Composite objective `mean CE + λ·penalty`, its exact gradients through the
//! tape, the optimizers, and the epoch loop shared by every model kind.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::polynet::{self, PolyNetwork, DEFAULT_JACOBIAN_BUDGET_BYTES};
use crate::tape::{GradTape, Var};

/// Stream ids for [`Rng::stream`], so init, shuffling and dropout never share draws.
pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Coeffs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug)]
pub struct RecordOptions {
    /// Build the Jacobian stream on the tape.
    pub dual: bool,
    /// Append the head Jacobian after the hidden ones.
    pub include_head: bool,
    /// Training mode: dropout masks are drawn.
    pub train_mode: bool,
    pub budget_bytes: usize,
}

/// Handles into a tape holding one forward pass of a model.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub input: Var,
    pub logits: Var,
    /// One per entry of [`Trainable::param_info`], same order.
    pub params: Vec<Var>,
    /// Stacked Jacobian blocks, (batch·d) × width each.
    pub jacobians: Vec<Var>,
}

/// A network the training loop can drive.
pub trait Trainable: Clone {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn param_info(&self) -> Vec<ParamInfo>;
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn record(
        &self,
        tape: &mut GradTape,
        x: &Matrix,
        opts: RecordOptions,
        rng: Option<&mut Rng>,
    ) -> Result<Recorded>;

    /// Inference-mode logits.
    fn logits(&self, x: &Matrix) -> Result<Matrix>;

    /// Inference-mode penalty over hidden layers (plus the head if asked).
    fn penalty(&self, x: &Matrix, include_head: bool) -> Result<f64>;

    fn num_params(&self) -> usize {
        self.param_info().iter().map(|p| p.rows * p.cols).sum()
    }
}

/// Row b·d + k of the result is `e_k`: the stacked per-sample identity `S⁽⁰⁾`.
pub(crate) fn identity_stack(batch: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(batch * d, d);
    for b in 0..batch {
        for k in 0..d {
            m.set(b * d + k, k, 1.0);
        }
    }
    m
}

pub(crate) fn check_budget(batch: usize, d: usize, widths: impl Iterator<Item = usize>, budget: usize) -> Result<()> {
    let needed: usize = widths.map(|w| batch * d * w * std::mem::size_of::<f64>()).sum();
    if needed > budget {
        return Err(Error::MemoryBudget { needed, budget });
    }
    Ok(())
}

impl Trainable for PolyNetwork {
    fn input_dim(&self) -> usize {
        PolyNetwork::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        PolyNetwork::num_classes(self)
    }

    fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (r, c) = layer.weights.shape();
            out.push(ParamInfo { name: format!("layer{l}.weights"), rows: r, cols: c, kind: ParamKind::Weight });
            out.push(ParamInfo { name: format!("layer{l}.bias"), rows: 1, cols: r, kind: ParamKind::Bias });
            out.push(ParamInfo { name: format!("layer{l}.coeffs"), rows: 4, cols: r, kind: ParamKind::Coeffs });
        }
        let (r, c) = self.head.weights.shape();
        out.push(ParamInfo { name: "head.weights".into(), rows: r, cols: c, kind: ParamKind::Weight });
        out.push(ParamInfo { name: "head.bias".into(), rows: 1, cols: r, kind: ParamKind::Bias });
        out
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            out.push(layer.weights.data());
            out.push(&layer.bias);
            out.push(layer.coeffs.table().data());
        }
        out.push(self.head.weights.data());
        out.push(&self.head.bias);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weights.data_mut());
            out.push(&mut layer.bias);
            out.push(layer.coeffs.table_mut().data_mut());
        }
        out.push(self.head.weights.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    fn record(
        &self,
        tape: &mut GradTape,
        x: &Matrix,
        opts: RecordOptions,
        _rng: Option<&mut Rng>,
    ) -> Result<Recorded> {
        let d = self.input_dim();
        if x.cols() != d {
            return Err(Error::Shape(format!("input has {} features, network expects {d}", x.cols())));
        }
        let batch = x.rows();
        if opts.dual {
            let widths = self.layers.iter().map(|l| l.width());
            check_budget(batch, d, widths, opts.budget_bytes)?;
        }
        let input = tape.leaf(x.clone());
        let mut params = Vec::new();
        let mut jacobians = Vec::new();
        let mut h = input;
        let mut jac: Option<Var> = None;
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(Matrix::row_vector(&layer.bias));
            let c = tape.leaf(layer.coeffs.table().clone());
            params.extend([w, b, c]);
            let zw = tape.matmul_t(h, w)?;
            let z = tape.add_row(zw, b)?;
            h = tape.poly(z, c)?;
            if opts.dual {
                let slope = tape.poly_deriv(z, c)?;
                let slope = tape.repeat_rows(slope, d)?;
                let prev = match jac {
                    Some(j) => j,
                    None => tape.leaf(identity_stack(batch, d)),
                };
                let moved = tape.matmul_t(prev, w)?;
                let j = tape.mul(moved, slope)?;
                jacobians.push(j);
                jac = Some(j);
            }
        }
        let hw = tape.leaf(self.head.weights.clone());
        let hb = tape.leaf(Matrix::row_vector(&self.head.bias));
        params.extend([hw, hb]);
        let hz = tape.matmul_t(h, hw)?;
        let logits = tape.add_row(hz, hb)?;
        if let (true, true, Some(j)) = (opts.dual, opts.include_head, jac) {
            jacobians.push(tape.matmul_t(j, hw)?);
        }
        Ok(Recorded { input, logits, params, jacobians })
    }

    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        polynet::forward_values(self, x).map(|(l, _)| l)
    }

    fn penalty(&self, x: &Matrix, include_head: bool) -> Result<f64> {
        let (_, dual) = polynet::forward_dual(self, x)?;
        let mut set = polynet::hidden_layer_set(self.layers.len());
        if include_head {
            set.push(self.layers.len());
        }
        polynet::dreg_penalty(&dual, &set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_dreg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Only read by baseline networks.
    pub dropout_rate: f64,
    pub seed: u64,
    /// Penalize the head Jacobian too (hidden layers only by default).
    pub penalty_include_head: bool,
    /// Stop after this many epochs without eval-accuracy improvement and
    /// restore the best parameters. `None` trains for the full epoch count.
    pub early_stopping_patience: Option<usize>,
    pub jacobian_budget_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_dreg: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            dropout_rate: 0.0,
            seed: 0,
            penalty_include_head: false,
            early_stopping_patience: None,
            jacobian_budget_bytes: DEFAULT_JACOBIAN_BUDGET_BYTES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dreg >= 0.0 && self.lambda_dreg.is_finite()) {
            return arg_err(format!("lambda_dreg must be a nonnegative number, got {}", self.lambda_dreg));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be positive");
        }
        if self.epochs == 0 {
            return arg_err("epochs must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return arg_err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return arg_err(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return arg_err("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        if self.early_stopping_patience == Some(0) {
            return arg_err("early_stopping_patience must be positive when set");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    /// One per parameter, shaped as in [`Trainable::param_info`].
    pub grads: Vec<Matrix>,
}

/// Mean softmax cross-entropy plus `λ·penalty`, and its exact gradient with
/// respect to every parameter.
///
/// The penalty is always evaluated so it can be logged; with `λ = 0` it is
/// left out of the objective entirely, so loss and gradients are those of
/// the plain task loss.
pub fn loss_and_grads<N: Trainable>(
    net: &N,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    train_mode: bool,
    rng: Option<&mut Rng>,
) -> Result<LossAndGrads> {
    if x.rows() == 0 {
        return arg_err("empty batch");
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.num_classes()) {
        return arg_err(format!("label {bad} outside [0, {})", net.num_classes()));
    }
    let mut tape = GradTape::new();
    let opts = RecordOptions {
        dual: true,
        include_head: cfg.penalty_include_head,
        train_mode,
        budget_bytes: cfg.jacobian_budget_bytes,
    };
    let rec = net.record(&mut tape, x, opts, rng)?;
    let task = tape.softmax_ce(rec.logits, labels, true)?;

    let mut sq_terms = Vec::with_capacity(rec.jacobians.len());
    for &j in &rec.jacobians {
        let s = tape.sum_squares(j)?;
        sq_terms.push((s, 1.0 / (x.rows() * rec.jacobians.len()) as f64));
    }
    let penalty = tape.combine(&sq_terms)?;

    let root = if cfg.lambda_dreg == 0.0 {
        task
    } else {
        tape.combine(&[(task, 1.0), (penalty, cfg.lambda_dreg)])?
    };
    let loss = tape.scalar(root);
    if !loss.is_finite() {
        return Err(Error::NumericOverflow {
            context: format!("objective evaluated to {loss}"),
        });
    }
    let mut g = tape.backward(root);
    let grads = rec
        .params
        .iter()
        .map(|&p| {
            let (r, c) = tape.value(p).shape();
            g.take(p).unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect();
    Ok(LossAndGrads {
        loss,
        task_loss: tape.scalar(task),
        penalty: tape.scalar(penalty),
        grads,
    })
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

fn check_conform(params: &[&mut [f64]], grads: &[Matrix]) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for (p, g) in params.iter().zip(grads) {
        assert_eq!(p.len(), g.data().len(), "gradient shape differs from parameter");
    }
}

/// `p ← p − lr·(g + wd·p)` (decay only where `decay[i]`).
pub fn step_sgd(params: &mut [&mut [f64]], grads: &[Matrix], decay: &[bool], lr: f64, weight_decay: f64) {
    check_conform(params, grads);
    for ((p, g), &dec) in params.iter_mut().zip(grads).zip(decay) {
        let wd = if dec { weight_decay } else { 0.0 };
        for (pi, gi) in p.iter_mut().zip(g.data()) {
            *pi -= lr * (gi + wd * *pi);
        }
    }
}

/// AdamW update with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn step_adam(
    params: &mut [&mut [f64]],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    check_conform(params, grads);
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[k] { weight_decay } else { 0.0 };
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub task_loss: f64,
    pub penalty: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when early stopping restored them.
    pub restored_epoch: Option<usize>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug)]
pub struct Trained<N> {
    pub model: N,
    pub log: TrainLog,
}

/// Features and labels of one split.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub labels: &'a [usize],
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

/// Mini-batch training with a per-epoch shuffle. Deterministic in `cfg.seed`.
pub fn train<N: Trainable>(net: N, train_set: Batch<'_>, eval_set: Batch<'_>, cfg: &TrainConfig) -> Result<Trained<N>> {
    cfg.validate()?;
    let n = train_set.x.rows();
    if n == 0 {
        return arg_err("empty training set");
    }
    if train_set.labels.len() != n {
        return Err(Error::Shape("training labels do not match rows".into()));
    }
    let mut net = net;
    let decay: Vec<bool> = net.param_info().iter().map(|p| p.kind == ParamKind::Weight).collect();
    let mut shuffle_rng = Rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = Rng::stream(cfg.seed, DROPOUT_STREAM);
    let mut state = OptimizerState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, N)> = None;

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut task_sum = 0.0;
        let mut pen_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.x.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let out = match loss_and_grads(&net, &x, &labels, cfg, true, Some(&mut dropout_rng)) {
                Ok(out) => out,
                Err(Error::NumericOverflow { .. }) => {
                    return Err(Error::Diverged { epoch, batch: bi, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            task_sum += out.task_loss * chunk.len() as f64;
            pen_sum += out.penalty * chunk.len() as f64;
            let mut params = net.param_slices_mut();
            match cfg.optimizer {
                OptimizerKind::Sgd => step_sgd(&mut params, &out.grads, &decay, cfg.learning_rate, cfg.weight_decay),
                OptimizerKind::Adam { beta1, beta2, eps } => step_adam(
                    &mut params,
                    &out.grads,
                    &decay,
                    &mut state,
                    cfg.learning_rate,
                    cfg.weight_decay,
                    beta1,
                    beta2,
                    eps,
                ),
            }
            if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch: bi, loss: out.loss });
            }
        }
        let eval_accuracy = if eval_set.x.rows() > 0 {
            match net.logits(eval_set.x) {
                Ok(l) => accuracy(&l, eval_set.labels),
                Err(Error::NumericOverflow { .. }) => {
                    return Err(Error::Diverged { epoch, batch: usize::MAX, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            }
        } else {
            0.0
        };
        log.epochs.push(EpochRecord {
            epoch,
            task_loss: task_sum / n as f64,
            penalty: pen_sum / n as f64,
            eval_accuracy,
        });
        if let Some(patience) = cfg.early_stopping_patience {
            let improved = best.as_ref().is_none_or(|(acc, _, _)| eval_accuracy > *acc);
            if improved {
                best = Some((eval_accuracy, epoch, net.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= patience {
                break;
            }
        }
    }
    if let Some((_, epoch, kept)) = best {
        net = kept;
        log.restored_epoch = Some(epoch);
    }
    Ok(Trained { model: net, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = vec![0.0];
        step_sgd(&mut [&mut p], &[Matrix::filled(1, 1, 1.0)], &[true], 0.1, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        let mut p = vec![1.0];
        step_sgd(&mut [&mut p], &[Matrix::zeros(1, 1)], &[true], 0.1, 0.01);
        assert!((p[0] - 0.999).abs() < 1e-15);
        let mut p = vec![1.0];
        step_sgd(&mut [&mut p], &[Matrix::zeros(1, 1)], &[false], 0.1, 0.01);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        for g in [0.5, -2.0, 1e-3] {
            let mut p = vec![0.25];
            let mut st = OptimizerState::new();
            step_adam(&mut [&mut p], &[Matrix::filled(1, 1, g)], &[true], &mut st, lr, 0.0, b1, b2, eps);
            // m̂ = g, v̂ = g² after one step
            let want = 0.25 - lr * g / (g.abs() + eps);
            assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);
        }
        let mut p = vec![1.0];
        let mut st = OptimizerState::new();
        step_adam(&mut [&mut p], &[Matrix::zeros(1, 1)], &[true], &mut st, 0.1, 0.01, b1, b2, eps);
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { dropout_rate: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lambda_dreg: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_stack_layout() {
        let s = identity_stack(2, 3);
        assert_eq!(s.shape(), (6, 3));
        assert_eq!(s.row(4), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn tape_penalty_matches_direct_dual_pass() {
        let mut rng = Rng::new(8);
        let net = PolyNetwork::new(5, &[6, 4], 3, &mut rng).unwrap();
        let x = crate::linalg::gauss_init(&mut rng, 7, 5, 1.0).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        for include_head in [false, true] {
            let cfg = TrainConfig { penalty_include_head: include_head, ..Default::default() };
            let out = loss_and_grads(&net, &x, &labels, &cfg, false, None).unwrap();
            let direct = net.penalty(&x, include_head).unwrap();
            assert!((out.penalty - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}
