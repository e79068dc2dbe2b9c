//! ReLU multilayer perceptrons used as the comparison models.
//!
//! Vanilla, dropout and weight-decay variants differ only in their
//! [`TrainConfig`](crate::train::TrainConfig); the ReLU-with-penalty variant
//! runs the same Jacobian stream as the polynomial network with
//! `φ′(z) = 1[z > 0]` (slope 0 at exactly `z = 0`).

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::polynet::{
    dreg_penalty, dual_pass, hidden_layer_set, poly_param_count, values_pass, Dense, DualState,
    HiddenLayer, ValueCache, DEFAULT_JACOBIAN_BUDGET_BYTES,
};
use crate::tape::{cross_entropy_rows, GradTape, Var};
use crate::train::{check_budget, identity_stack, ParamInfo, ParamKind, RecordOptions, Recorded, Trainable};

/// As a hidden layer, a [`Dense`] map is followed by `max(0, z)`.
impl HiddenLayer for Dense {
    fn weights(&self) -> &Matrix {
        &self.weights
    }
    fn bias(&self) -> &[f64] {
        &self.bias
    }
    fn activate(&self, _j: usize, z: f64) -> f64 {
        z.max(0.0)
    }
    fn slope(&self, _j: usize, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNet {
    pub layers: Vec<Dense>,
    pub head: Dense,
    pub dropout_rate: f64,
    input_dim: usize,
}

impl BaselineNet {
    pub fn new(
        input_dim: usize,
        widths: &[usize],
        num_classes: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.is_empty() {
            return arg_err("a baseline network needs at least one hidden layer");
        }
        if input_dim == 0 || num_classes == 0 || widths.contains(&0) {
            return shape_err("input dim, widths and class count must be positive");
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return arg_err(format!("dropout rate {dropout_rate} outside [0, 1)"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            layers.push(Dense::init(rng, fan_in, w)?);
            fan_in = w;
        }
        let head = Dense::init(rng, fan_in, num_classes)?;
        Ok(BaselineNet {
            layers,
            head,
            dropout_rate,
            input_dim,
        })
    }

    pub fn from_parts(input_dim: usize, layers: Vec<Dense>, head: Dense, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("a baseline network needs at least one hidden layer");
        }
        let mut fan_in = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_width() != fan_in {
                return shape_err(format!(
                    "layer {l} expects {} inputs, previous width is {fan_in}",
                    layer.in_width()
                ));
            }
            fan_in = layer.out_width();
        }
        if head.in_width() != fan_in {
            return shape_err(format!("head expects {} inputs, last width is {fan_in}", head.in_width()));
        }
        Ok(BaselineNet {
            layers,
            head,
            dropout_rate,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_width()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Dense::out_width).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum::<usize>() + self.head.num_params()
    }
}

pub fn baseline_param_count(input_dim: usize, widths: &[usize], num_classes: usize) -> usize {
    let mut fan_in = input_dim;
    let mut total = 0;
    for &w in widths {
        total += w * fan_in + w;
        fan_in = w;
    }
    total + num_classes * fan_in + num_classes
}

/// Inverted-dropout mask: entries 0 or 1/(1−rate).
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.uniform() < rate { 0.0 } else { keep };
    }
    m
}

/// Standard MLP forward. Dropout masks are drawn only in train mode.
pub fn baseline_forward(
    net: &BaselineNet,
    x: &Matrix,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(Matrix, ValueCache)> {
    let active = mode == Mode::Train && net.dropout_rate > 0.0;
    if !active {
        return values_pass(&net.layers, &net.head, net.input_dim, x);
    }
    let rng = rng.ok_or_else(|| Error::Argument("train-mode dropout needs a generator".into()))?;
    if x.cols() != net.input_dim {
        return shape_err(format!("input has {} features, network expects {}", x.cols(), net.input_dim));
    }
    let mut preacts = Vec::new();
    let mut acts: Vec<Matrix> = Vec::new();
    for layer in &net.layers {
        let input = acts.last().unwrap_or(x);
        let z = layer.apply(input)?;
        let mask = dropout_mask(z.rows(), z.cols(), net.dropout_rate, rng);
        let h = z.map(|v| v.max(0.0)).hadamard(&mask)?;
        preacts.push(z);
        acts.push(h);
    }
    let logits = net.head.apply(acts.last().expect("at least one layer"))?;
    Ok((logits, ValueCache { preacts, acts }))
}

/// Value and Jacobian streams with the ReLU step as slope.
pub fn baseline_forward_dual(net: &BaselineNet, x: &Matrix) -> Result<(Matrix, DualState)> {
    dual_pass(&net.layers, &net.head, net.input_dim, x, DEFAULT_JACOBIAN_BUDGET_BYTES)
}

/// L2 norm of ∂(per-sample cross-entropy)/∂x for each row, by reverse accumulation.
pub fn baseline_input_grads(net: &BaselineNet, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let grads = baseline_input_gradients(net, x, labels)?;
    Ok((0..grads.rows()).map(|r| grads.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

/// Row b holds ∂loss_b/∂x_b. Summing the per-sample losses keeps rows separate.
pub fn baseline_input_gradients(net: &BaselineNet, x: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let opts = RecordOptions {
        dual: false,
        include_head: false,
        train_mode: false,
        budget_bytes: DEFAULT_JACOBIAN_BUDGET_BYTES,
    };
    let rec = net.record(&mut tape, x, opts, None)?;
    let loss = tape.softmax_ce(rec.logits, labels, false)?;
    let g = tape.backward(loss);
    Ok(g.get_or_zeros(rec.input, x.rows(), x.cols()))
}

/// Per-sample cross-entropy losses in eval mode.
pub fn baseline_sample_losses(net: &BaselineNet, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let (logits, _) = values_pass(&net.layers, &net.head, net.input_dim, x)?;
    Ok(cross_entropy_rows(&logits, labels))
}

impl Trainable for BaselineNet {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        BaselineNet::num_classes(self)
    }

    fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (r, c) = layer.weights.shape();
            out.push(ParamInfo { name: format!("layer{l}.weights"), rows: r, cols: c, kind: ParamKind::Weight });
            out.push(ParamInfo { name: format!("layer{l}.bias"), rows: 1, cols: r, kind: ParamKind::Bias });
        }
        let (r, c) = self.head.weights.shape();
        out.push(ParamInfo { name: "head.weights".into(), rows: r, cols: c, kind: ParamKind::Weight });
        out.push(ParamInfo { name: "head.bias".into(), rows: 1, cols: r, kind: ParamKind::Bias });
        out
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(layer.weights.data());
            out.push(&layer.bias);
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(layer.weights.data_mut());
            out.push(&mut layer.bias);
        }
        out
    }

    fn record(
        &self,
        tape: &mut GradTape,
        x: &Matrix,
        opts: RecordOptions,
        mut rng: Option<&mut Rng>,
    ) -> Result<Recorded> {
        let d = self.input_dim;
        if x.cols() != d {
            return shape_err(format!("input has {} features, network expects {d}", x.cols()));
        }
        let batch = x.rows();
        if opts.dual {
            check_budget(batch, d, self.layers.iter().map(Dense::out_width), opts.budget_bytes)?;
        }
        let dropout = opts.train_mode && self.dropout_rate > 0.0;
        let input = tape.leaf(x.clone());
        let mut params = Vec::new();
        let mut jacobians = Vec::new();
        let mut h = input;
        let mut jac: Option<Var> = None;
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(Matrix::row_vector(&layer.bias));
            params.extend([w, b]);
            let zw = tape.matmul_t(h, w)?;
            let z = tape.add_row(zw, b)?;
            let mut act = tape.relu(z)?;
            let mut slope = if opts.dual { Some(tape.step(z)?) } else { None };
            if dropout {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Argument("train-mode dropout needs a generator".into()))?;
                let (r, c) = tape.value(z).shape();
                let mask = tape.leaf(dropout_mask(r, c, self.dropout_rate, rng));
                act = tape.mul(act, mask)?;
                if let Some(s) = slope {
                    slope = Some(tape.mul(s, mask)?);
                }
            }
            h = act;
            if let Some(s) = slope {
                let s = tape.repeat_rows(s, d)?;
                let prev = match jac {
                    Some(j) => j,
                    None => tape.leaf(identity_stack(batch, d)),
                };
                let moved = tape.matmul_t(prev, w)?;
                let j = tape.mul(moved, s)?;
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
        baseline_forward(self, x, Mode::Eval, None).map(|(l, _)| l)
    }

    fn penalty(&self, x: &Matrix, include_head: bool) -> Result<f64> {
        let (_, dual) = baseline_forward_dual(self, x)?;
        let mut set = hidden_layer_set(self.layers.len());
        if include_head {
            set.push(self.layers.len());
        }
        dreg_penalty(&dual, &set)
    }
}

/// Outcome of sizing a baseline against a polynomial network.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityMatch {
    pub widths: Vec<usize>,
    pub poly_params: usize,
    pub baseline_params: usize,
    /// (baseline − poly) / poly
    pub relative_gap: f64,
}

impl CapacityMatch {
    pub fn within_tolerance(&self) -> bool {
        self.relative_gap.abs() <= MATCH_TOLERANCE
    }
}

pub const MATCH_TOLERANCE: f64 = 0.05;

/// Baseline widths whose parameter count is closest to the polynomial network's.
///
/// Widths are the polynomial widths scaled by a common factor `t / max_width`
/// (rounded, at least 1), searching `t` upward. When no candidate lands within
/// ±5% the closest one is returned and the mismatch is logged.
pub fn matched_capacity(input_dim: usize, poly_widths: &[usize], num_classes: usize) -> Result<CapacityMatch> {
    if poly_widths.is_empty() || poly_widths.contains(&0) || input_dim == 0 || num_classes == 0 {
        return arg_err("matched_capacity needs a valid polynomial configuration");
    }
    let target = poly_param_count(input_dim, poly_widths, num_classes);
    let wmax = *poly_widths.iter().max().expect("nonempty");
    let mut best: Option<CapacityMatch> = None;
    for t in 1..=(4 * wmax + 8) {
        let widths: Vec<usize> = poly_widths
            .iter()
            .map(|&w| ((w * t) as f64 / wmax as f64).round().max(1.0) as usize)
            .collect();
        let count = baseline_param_count(input_dim, &widths, num_classes);
        let gap = (count as f64 - target as f64) / target as f64;
        let better = best.as_ref().is_none_or(|b| gap.abs() < b.relative_gap.abs());
        if better {
            best = Some(CapacityMatch {
                widths,
                poly_params: target,
                baseline_params: count,
                relative_gap: gap,
            });
        }
    }
    let best = best.expect("at least one candidate");
    if !best.within_tolerance() {
        log::warn!(
            "capacity mismatch: polynomial net has {} parameters, closest baseline {:?} has {} ({:+.1}%)",
            best.poly_params,
            best.widths,
            best.baseline_params,
            100.0 * best.relative_gap
        );
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gauss_init;

    fn scalar_forward(net: &BaselineNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &net.layers {
            let mut next = vec![0.0; layer.out_width()];
            for (i, out) in next.iter_mut().enumerate() {
                let mut s = layer.bias[i];
                for (j, hj) in h.iter().enumerate() {
                    s += layer.weights.get(i, j) * hj;
                }
                *out = if s > 0.0 { s } else { 0.0 };
            }
            h = next;
        }
        (0..net.head.out_width())
            .map(|i| net.head.bias[i] + h.iter().enumerate().map(|(j, hj)| net.head.weights.get(i, j) * hj).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = Rng::new(21);
        let net = BaselineNet::new(5, &[7, 4], 3, 0.0, &mut rng).unwrap();
        let x = gauss_init(&mut rng, 6, 5, 1.0).unwrap();
        let (logits, _) = baseline_forward(&net, &x, Mode::Eval, None).unwrap();
        for r in 0..6 {
            let want = scalar_forward(&net, x.row(r));
            for (a, b) in logits.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_region_is_linear() {
        // identity weights with a large bias keep every unit active
        let layer = Dense::new(Matrix::identity(3), vec![10.0; 3]).unwrap();
        let head = Dense::new(Matrix::from_rows(&[vec![1.0, 2.0, -1.0]]), vec![0.5]).unwrap();
        let net = BaselineNet::from_parts(3, vec![layer], head, 0.0).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]);
        let (logits, _) = baseline_forward(&net, &x, Mode::Eval, None).unwrap();
        let linear = 0.5 + (10.1) + 2.0 * 9.8 - 10.3;
        assert!((logits.get(0, 0) - linear).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut rng = Rng::new(3);
        let net = BaselineNet::new(4, &[8], 2, 0.5, &mut rng).unwrap();
        let x = gauss_init(&mut rng, 5, 4, 1.0).unwrap();
        let (a, _) = baseline_forward(&net, &x, Mode::Eval, None).unwrap();
        let plain = BaselineNet { dropout_rate: 0.0, ..net.clone() };
        let (b, _) = baseline_forward(&plain, &x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert!(baseline_forward(&net, &x, Mode::Train, None).is_err());
    }

    #[test]
    fn zero_weights_give_zero_input_gradients() {
        let mut rng = Rng::new(3);
        let mut net = BaselineNet::new(4, &[5], 3, 0.0, &mut rng).unwrap();
        for p in net.param_slices_mut() {
            p.fill(0.0);
        }
        let x = gauss_init(&mut rng, 4, 4, 1.0).unwrap();
        let norms = baseline_input_grads(&net, &x, &[0, 1, 2, 0]).unwrap();
        assert!(norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn capacity_match_examples() {
        let m = matched_capacity(8, &[16, 16], 2).unwrap();
        assert_eq!(m.poly_params, 578);
        assert!(m.within_tolerance(), "{m:?}");
        assert_eq!(m.baseline_params, baseline_param_count(8, &m.widths, 2));

        let tiny = matched_capacity(8, &[1], 2).unwrap();
        assert!(!tiny.within_tolerance());

        assert!(baseline_param_count(8, &[16, 16], 2) < poly_param_count(8, &[16, 16], 2));
    }

    #[test]
    fn relu_dual_uses_step_slope() {
        let layer = Dense::new(Matrix::from_rows(&[vec![1.0], vec![-1.0]]), vec![0.0, 0.0]).unwrap();
        let head = Dense::new(Matrix::from_rows(&[vec![1.0, 1.0]]), vec![0.0]).unwrap();
        let net = BaselineNet::from_parts(1, vec![layer], head, 0.0).unwrap();
        let (_, dual) = baseline_forward_dual(&net, &Matrix::from_rows(&[vec![2.0], vec![0.0]])).unwrap();
        assert_eq!(dual.jacobians[0].sample(0).data(), &[1.0, 0.0]);
        // z = 0 exactly: slope 0 on both units
        assert_eq!(dual.jacobians[0].sample(1).data(), &[0.0, 0.0]);
    }
}
