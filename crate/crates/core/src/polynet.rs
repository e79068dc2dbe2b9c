//! Networks whose neurons apply a learnable cubic `φ(z) = c0 + c1·z + c2·z² + c3·z³`,
//! and the dual-stream forward pass.
//!
//! The dual stream carries, next to each activation `h⁽ˡ⁾`, the cumulative
//! input Jacobian `S⁽ˡ⁾ = ∂h⁽ˡ⁾/∂x` of every sample:
//!
//! ```text
//! S⁽¹⁾ = diag(φ′(z⁽¹⁾)) · W⁽¹⁾
//! S⁽ˡ⁾ = diag(φ′(z⁽ˡ⁾)) · W⁽ˡ⁾ · S⁽ˡ⁻¹⁾
//! ```
//!
//! No backward pass is involved. Each layer costs `d` extra matrix-vector
//! products per sample on top of the value stream.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{gauss_init, Matrix, Rng};

/// Default cap on the memory held by per-sample Jacobian blocks (512 MiB).
pub const DEFAULT_JACOBIAN_BUDGET_BYTES: usize = 512 << 20;

/// Per-neuron cubic coefficients, stored as a 4 × width table (row k holds `c_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCoeffs {
    table: Matrix,
}

impl ActivationCoeffs {
    pub fn new(c0: Vec<f64>, c1: Vec<f64>, c2: Vec<f64>, c3: Vec<f64>) -> Result<Self> {
        let w = c0.len();
        if c1.len() != w || c2.len() != w || c3.len() != w {
            return shape_err("coefficient vectors must share one length");
        }
        let data: Vec<f64> = [c0, c1, c2, c3].concat();
        Self::from_table(Matrix::from_vec(4, w, data)?)
    }

    pub fn from_table(table: Matrix) -> Result<Self> {
        if table.rows() != 4 {
            return shape_err(format!("coefficient table must have 4 rows, got {}", table.rows()));
        }
        if !table.is_finite() {
            return arg_err("coefficients must be finite");
        }
        Ok(ActivationCoeffs { table })
    }

    /// The same polynomial on every neuron.
    pub fn uniform(width: usize, c: [f64; 4]) -> Self {
        let mut table = Matrix::zeros(4, width);
        for (k, ck) in c.iter().enumerate() {
            table.row_mut(k).fill(*ck);
        }
        ActivationCoeffs { table }
    }

    /// `φ(z) = z` plus N(0, 0.01²) noise on the quadratic and cubic terms.
    pub fn near_identity(width: usize, rng: &mut Rng) -> Self {
        let mut c = Self::uniform(width, [0.0, 1.0, 0.0, 0.0]);
        for k in 2..4 {
            for v in c.table.row_mut(k) {
                *v = 0.01 * rng.normal();
            }
        }
        c
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    /// Coefficient `c_k` for every neuron.
    pub fn c(&self, k: usize) -> &[f64] {
        self.table.row(k)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub(crate) fn table_mut(&mut self) -> &mut Matrix {
        &mut self.table
    }

    #[inline]
    pub fn value(&self, j: usize, z: f64) -> f64 {
        let t = self.table.data();
        let w = self.width();
        t[j] + z * (t[w + j] + z * (t[2 * w + j] + z * t[3 * w + j]))
    }

    #[inline]
    pub fn slope(&self, j: usize, z: f64) -> f64 {
        let t = self.table.data();
        let w = self.width();
        t[w + j] + z * (2.0 * t[2 * w + j] + 3.0 * z * t[3 * w + j])
    }

    #[inline]
    pub fn curvature(&self, j: usize, z: f64) -> f64 {
        let t = self.table.data();
        let w = self.width();
        2.0 * t[2 * w + j] + 6.0 * z * t[3 * w + j]
    }
}

fn check_width(coeffs: &ActivationCoeffs, z: &Matrix) -> Result<()> {
    if z.cols() != coeffs.width() {
        return shape_err(format!(
            "{} columns vs {} polynomial coefficients",
            z.cols(),
            coeffs.width()
        ));
    }
    Ok(())
}

fn apply_columnwise(z: &Matrix, f: impl Fn(usize, f64) -> f64) -> Matrix {
    let mut out = z.clone();
    let cols = z.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(i % cols, *v);
    }
    out
}

/// Applies each column's polynomial elementwise.
pub fn poly_eval(coeffs: &ActivationCoeffs, z: &Matrix) -> Result<Matrix> {
    check_width(coeffs, z)?;
    Ok(apply_columnwise(z, |j, v| coeffs.value(j, v)))
}

/// First (`order = 1`) or second (`order = 2`) derivative of each column's polynomial.
pub fn poly_deriv(coeffs: &ActivationCoeffs, z: &Matrix, order: u8) -> Result<Matrix> {
    check_width(coeffs, z)?;
    match order {
        1 => Ok(apply_columnwise(z, |j, v| coeffs.slope(j, v))),
        2 => Ok(apply_columnwise(z, |j, v| coeffs.curvature(j, v))),
        _ => arg_err(format!("derivative order must be 1 or 2, got {order}")),
    }
}

/// Affine map `x ↦ x·Wᵀ + b` with `W` stored out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return shape_err(format!(
                "bias length {} vs {} output units",
                bias.len(),
                weights.rows()
            ));
        }
        Ok(Dense { weights, bias })
    }

    /// Normal weights with std 1/√fan_in, zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Self> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Ok(Dense {
            weights: gauss_init(rng, fan_out, fan_in, scale)?,
            bias: vec![0.0; fan_out],
        })
    }

    pub fn in_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(&self.weights)?.add_row_broadcast(&self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub coeffs: ActivationCoeffs,
}

impl PolyLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, coeffs: ActivationCoeffs) -> Result<Self> {
        let out = weights.rows();
        if bias.len() != out || coeffs.width() != out {
            return shape_err(format!(
                "layer with {out} units has bias {} and {} coefficient columns",
                bias.len(),
                coeffs.width()
            ));
        }
        Ok(PolyLayer {
            weights,
            bias,
            coeffs,
        })
    }

    pub fn width(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len() + 4 * self.width()
    }
}

/// What the shared forward routines need from a hidden layer.
pub(crate) trait HiddenLayer {
    fn weights(&self) -> &Matrix;
    fn bias(&self) -> &[f64];
    fn activate(&self, j: usize, z: f64) -> f64;
    fn slope(&self, j: usize, z: f64) -> f64;
}

impl HiddenLayer for PolyLayer {
    fn weights(&self) -> &Matrix {
        &self.weights
    }
    fn bias(&self) -> &[f64] {
        &self.bias
    }
    fn activate(&self, j: usize, z: f64) -> f64 {
        self.coeffs.value(j, z)
    }
    fn slope(&self, j: usize, z: f64) -> f64 {
        self.coeffs.slope(j, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyNetwork {
    pub layers: Vec<PolyLayer>,
    pub head: Dense,
    input_dim: usize,
}

impl PolyNetwork {
    /// Fresh network: weights N(0, 1/fan_in), zero biases, near-identity cubics.
    pub fn new(input_dim: usize, widths: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if widths.is_empty() {
            return arg_err("a polynomial network needs at least one hidden layer");
        }
        if input_dim == 0 || num_classes == 0 || widths.contains(&0) {
            return shape_err("input dim, widths and class count must be positive");
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let dense = Dense::init(rng, fan_in, w)?;
            let coeffs = ActivationCoeffs::near_identity(w, rng);
            layers.push(PolyLayer::new(dense.weights, dense.bias, coeffs)?);
            fan_in = w;
        }
        let head = Dense::init(rng, fan_in, num_classes)?;
        Ok(PolyNetwork {
            layers,
            head,
            input_dim,
        })
    }

    pub fn from_parts(input_dim: usize, layers: Vec<PolyLayer>, head: Dense) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("a polynomial network needs at least one hidden layer");
        }
        let mut fan_in = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.cols() != fan_in {
                return shape_err(format!(
                    "layer {l} expects {} inputs, previous width is {fan_in}",
                    layer.weights.cols()
                ));
            }
            fan_in = layer.width();
        }
        if head.in_width() != fan_in {
            return shape_err(format!(
                "head expects {} inputs, last hidden width is {fan_in}",
                head.in_width()
            ));
        }
        Ok(PolyNetwork {
            layers,
            head,
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
        self.layers.iter().map(PolyLayer::width).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(PolyLayer::num_params).sum::<usize>() + self.head.num_params()
    }
}

/// Parameter count of a polynomial network with the given shape.
pub fn poly_param_count(input_dim: usize, widths: &[usize], num_classes: usize) -> usize {
    let mut fan_in = input_dim;
    let mut total = 0;
    for &w in widths {
        total += w * fan_in + w + 4 * w;
        fan_in = w;
    }
    total + num_classes * fan_in + num_classes
}

/// Value-stream intermediates: pre-activations `z⁽ˡ⁾` and activations `h⁽ˡ⁾`.
#[derive(Clone, Debug)]
pub struct ValueCache {
    pub preacts: Vec<Matrix>,
    pub acts: Vec<Matrix>,
}

/// Per-sample Jacobians of one layer, laid out (batch, rows, cols).
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlock {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl JacobianBlock {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sample_slice(&self, b: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[b * n..(b + 1) * n]
    }

    /// The Jacobian of sample `b` as a rows × cols matrix.
    pub fn sample(&self, b: usize) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.sample_slice(b).to_vec())
            .expect("block slice has rows*cols entries")
    }

    pub fn frobenius_sq(&self, b: usize) -> f64 {
        self.sample_slice(b).iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Both streams of a dual forward pass. `S⁽⁰⁾ = I` is implicit.
#[derive(Clone, Debug)]
pub struct DualState {
    pub preacts: Vec<Matrix>,
    pub acts: Vec<Matrix>,
    pub jacobians: Vec<JacobianBlock>,
    pub head_jacobian: JacobianBlock,
}

impl DualState {
    pub fn input_dim(&self) -> usize {
        self.head_jacobian.cols
    }

    pub fn batch(&self) -> usize {
        self.head_jacobian.batch
    }
}

fn finite_or_overflow(m: &Matrix, context: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { context: context() })
    }
}

pub(crate) fn values_pass<L: HiddenLayer>(
    layers: &[L],
    head: &Dense,
    input_dim: usize,
    x: &Matrix,
) -> Result<(Matrix, ValueCache)> {
    if x.cols() != input_dim {
        return shape_err(format!("input has {} features, network expects {input_dim}", x.cols()));
    }
    let mut preacts = Vec::with_capacity(layers.len());
    let mut acts: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = acts.last().unwrap_or(x);
        let z = input.matmul_t(layer.weights())?.add_row_broadcast(layer.bias())?;
        finite_or_overflow(&z, || format!("layer {l} pre-activations"))?;
        let h = apply_columnwise(&z, |j, v| layer.activate(j, v));
        finite_or_overflow(&h, || format!("layer {l} activations"))?;
        preacts.push(z);
        acts.push(h);
    }
    let logits = head.apply(acts.last().expect("at least one layer"))?;
    finite_or_overflow(&logits, || "output head".to_string())?;
    Ok((logits, ValueCache { preacts, acts }))
}

pub(crate) fn dual_pass<L: HiddenLayer>(
    layers: &[L],
    head: &Dense,
    input_dim: usize,
    x: &Matrix,
    budget_bytes: usize,
) -> Result<(Matrix, DualState)> {
    let batch = x.rows();
    let d = input_dim;
    let needed: usize = layers
        .iter()
        .map(|l| l.weights().rows())
        .chain(std::iter::once(head.out_width()))
        .map(|w| batch * w * d * std::mem::size_of::<f64>())
        .sum();
    if needed > budget_bytes {
        return Err(Error::MemoryBudget {
            needed,
            budget: budget_bytes,
        });
    }
    let (logits, cache) = values_pass(layers, head, input_dim, x)?;

    let mut jacobians: Vec<JacobianBlock> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let w = layer.weights();
        let (out, fan_in) = w.shape();
        let z = &cache.preacts[l];
        let mut data = vec![0.0; batch * out * d];
        for b in 0..batch {
            let dst = &mut data[b * out * d..(b + 1) * out * d];
            match jacobians.last() {
                // S⁽¹⁾ = diag(φ′)·W: W is out × d already.
                None => dst.copy_from_slice(w.data()),
                Some(prev) => {
                    let s_prev = prev.sample_slice(b);
                    for i in 0..out {
                        let wrow = w.row(i);
                        let o = &mut dst[i * d..(i + 1) * d];
                        for (p, &wip) in wrow.iter().enumerate().take(fan_in) {
                            if wip == 0.0 {
                                continue;
                            }
                            for (oj, &sj) in o.iter_mut().zip(&s_prev[p * d..(p + 1) * d]) {
                                *oj += wip * sj;
                            }
                        }
                    }
                }
            }
            let zb = z.row(b);
            for i in 0..out {
                let s = layer.slope(i, zb[i]);
                for v in &mut dst[i * d..(i + 1) * d] {
                    *v *= s;
                }
            }
        }
        let block = JacobianBlock {
            batch,
            rows: out,
            cols: d,
            data,
        };
        if !block.is_finite() {
            return Err(Error::NumericOverflow {
                context: format!("layer {l} jacobian stream"),
            });
        }
        jacobians.push(block);
    }

    let last = jacobians.last().expect("at least one layer");
    let classes = head.out_width();
    let mut hdata = vec![0.0; batch * classes * d];
    for b in 0..batch {
        let s = Matrix::from_vec(last.rows, d, last.sample_slice(b).to_vec())?;
        let hj = head.weights.matmul(&s)?;
        hdata[b * classes * d..(b + 1) * classes * d].copy_from_slice(hj.data());
    }
    let head_jacobian = JacobianBlock {
        batch,
        rows: classes,
        cols: d,
        data: hdata,
    };
    if !head_jacobian.is_finite() {
        return Err(Error::NumericOverflow {
            context: "output head jacobian".to_string(),
        });
    }
    Ok((
        logits,
        DualState {
            preacts: cache.preacts,
            acts: cache.acts,
            jacobians,
            head_jacobian,
        },
    ))
}

/// Value stream only.
pub fn forward_values(net: &PolyNetwork, x: &Matrix) -> Result<(Matrix, ValueCache)> {
    values_pass(&net.layers, &net.head, net.input_dim, x)
}

/// Value and Jacobian streams, under the default memory budget.
pub fn forward_dual(net: &PolyNetwork, x: &Matrix) -> Result<(Matrix, DualState)> {
    forward_dual_with_budget(net, x, DEFAULT_JACOBIAN_BUDGET_BYTES)
}

pub fn forward_dual_with_budget(
    net: &PolyNetwork,
    x: &Matrix,
    budget_bytes: usize,
) -> Result<(Matrix, DualState)> {
    dual_pass(&net.layers, &net.head, net.input_dim, x, budget_bytes)
}

/// Mean over batch and selected layers of `‖S⁽ˡ⁾‖_F²`.
///
/// Indices `0..L` select hidden layers; index `L` selects the head Jacobian.
pub fn dreg_penalty(dual: &DualState, include_layers: &[usize]) -> Result<f64> {
    if include_layers.is_empty() {
        return arg_err("penalty layer set is empty");
    }
    let hidden = dual.jacobians.len();
    let batch = dual.batch();
    if batch == 0 {
        return arg_err("penalty of an empty batch");
    }
    let mut total = 0.0;
    for &l in include_layers {
        let block = match l {
            l if l < hidden => &dual.jacobians[l],
            l if l == hidden => &dual.head_jacobian,
            _ => return arg_err(format!("layer index {l} out of range (0..={hidden})")),
        };
        total += (0..batch).map(|b| block.frobenius_sq(b)).sum::<f64>();
    }
    Ok(total / (batch * include_layers.len()) as f64)
}

/// Hidden layers `0..L`, the default penalty set.
pub fn hidden_layer_set(num_layers: usize) -> Vec<usize> {
    (0..num_layers).collect()
}
