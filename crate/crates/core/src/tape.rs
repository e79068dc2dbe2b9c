//! Reverse-mode tape over the matrix primitives needed by the training
//! objective, including the Jacobian stream of the regularizer.
//!
//! Every node stores its forward value. `backward` walks the nodes in reverse
//! and accumulates adjoints; `replay` recomputes every value from the leaves.

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a · wᵀ`
    MatMulT(Var, Var),
    /// `a + 1·bᵀ`, bias is 1 × cols
    AddRow(Var, Var),
    /// φ(z) with a 4 × cols coefficient table
    Poly(Var, Var),
    /// φ′(z)
    PolyDeriv(Var, Var),
    Relu(Var),
    /// 1[z > 0]; treated as locally constant
    Step(Var),
    /// every row repeated `times` times consecutively
    RepeatRows(Var, usize),
    Mul(Var, Var),
    SumSquares(Var),
    Sum(Var),
    /// saves the softmax probabilities
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        mean: bool,
    },
    /// Σ cᵢ·vᵢ over same-shaped inputs
    Combine(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    saved: Option<Matrix>,
}

#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; `None` when no path reaches the root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// The adjoint of `v`, or zeros of the given shape when unreachable.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn poly_value(c: &Matrix, j: usize, z: f64) -> f64 {
    let w = c.cols();
    let t = c.data();
    t[j] + z * (t[w + j] + z * (t[2 * w + j] + z * t[3 * w + j]))
}

fn poly_slope(c: &Matrix, j: usize, z: f64) -> f64 {
    let w = c.cols();
    let t = c.data();
    t[w + j] + z * (2.0 * t[2 * w + j] + 3.0 * z * t[3 * w + j])
}

fn poly_curvature(c: &Matrix, j: usize, z: f64) -> f64 {
    let w = c.cols();
    let t = c.data();
    2.0 * t[2 * w + j] + 6.0 * z * t[3 * w + j]
}

fn map_cols(z: &Matrix, f: impl Fn(usize, f64) -> f64) -> Matrix {
    let cols = z.cols();
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(i % cols, *v);
    }
    out
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Per-row cross-entropy `−log softmax(logits)[label]`, computed stably.
pub fn cross_entropy_rows(logits: &Matrix, labels: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .collect()
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1 × 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, op: Op, value: Matrix, saved: Option<Matrix>) -> Var {
        self.nodes.push(Node { op, value, saved });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, None)
    }

    fn forward(&self, op: &Op) -> Result<(Matrix, Option<Matrix>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::MatMulT(a, w) => val(a).matmul_t(val(w))?,
            Op::AddRow(a, b) => {
                let b = val(b);
                if b.rows() != 1 {
                    return shape_err("bias must be a single row");
                }
                val(a).add_row_broadcast(b.data())?
            }
            Op::Poly(z, c) => {
                let (z, c) = (val(z), val(c));
                check_coeffs(z, c)?;
                map_cols(z, |j, v| poly_value(c, j, v))
            }
            Op::PolyDeriv(z, c) => {
                let (z, c) = (val(z), val(c));
                check_coeffs(z, c)?;
                map_cols(z, |j, v| poly_slope(c, j, v))
            }
            Op::Relu(z) => val(z).map(|v| v.max(0.0)),
            Op::Step(z) => val(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::RepeatRows(a, times) => {
                let a = val(a);
                let mut data = Vec::with_capacity(a.rows() * times * a.cols());
                for r in 0..a.rows() {
                    for _ in 0..*times {
                        data.extend_from_slice(a.row(r));
                    }
                }
                Matrix::from_vec(a.rows() * times, a.cols(), data)?
            }
            Op::Mul(a, b) => val(a).hadamard(val(b))?,
            Op::SumSquares(a) => Matrix::filled(1, 1, val(a).sum_squares()),
            Op::Sum(a) => Matrix::filled(1, 1, val(a).data().iter().sum()),
            Op::SoftmaxCe {
                logits,
                labels,
                mean,
            } => {
                let l = val(logits);
                if labels.len() != l.rows() {
                    return shape_err(format!("{} labels for {} rows", labels.len(), l.rows()));
                }
                if labels.iter().any(|&y| y >= l.cols()) {
                    return shape_err("label outside the class range");
                }
                let total: f64 = cross_entropy_rows(l, labels).iter().sum();
                let loss = if *mean { total / l.rows() as f64 } else { total };
                return Ok((Matrix::filled(1, 1, loss), Some(softmax_rows(l))));
            }
            Op::Combine(terms) => {
                let (first, c0) = terms[0];
                let mut acc = val(&first).scale(c0);
                for (v, c) in &terms[1..] {
                    let term = val(v);
                    if term.shape() != acc.shape() {
                        return shape_err("combine terms differ in shape");
                    }
                    acc.add_assign(&term.scale(*c));
                }
                acc
            }
        };
        Ok((out, None))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.forward(&op)?;
        Ok(self.push(op, value, saved))
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        self.record(Op::MatMulT(a, w))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn poly(&mut self, z: Var, coeffs: Var) -> Result<Var> {
        self.record(Op::Poly(z, coeffs))
    }

    pub fn poly_deriv(&mut self, z: Var, coeffs: Var) -> Result<Var> {
        self.record(Op::PolyDeriv(z, coeffs))
    }

    pub fn relu(&mut self, z: Var) -> Result<Var> {
        self.record(Op::Relu(z))
    }

    pub fn step(&mut self, z: Var) -> Result<Var> {
        self.record(Op::Step(z))
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.record(Op::RepeatRows(a, times))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        self.record(Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            mean,
        })
    }

    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return shape_err("combine needs at least one term");
        }
        self.record(Op::Combine(terms.to_vec()))
    }

    /// Recomputes every node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut replayed = GradTape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            match node.op {
                Op::Leaf => {
                    replayed.leaf(node.value.clone());
                }
                ref op => {
                    replayed.record(op.clone())?;
                }
            }
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Adjoints of every node with respect to the 1 × 1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMulT(a, w) => {
                    let ga = g.matmul(val(w)).expect("shapes fixed at record time");
                    let gw = g.t_matmul(val(a)).expect("shapes fixed at record time");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *w, gw);
                }
                Op::AddRow(a, b) => {
                    let gb = Matrix::row_vector(&g.column_sums());
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Poly(z, c) => {
                    let (zv, cv) = (val(z), val(c));
                    let cols = zv.cols();
                    let mut gz = g.clone();
                    let mut gc = Matrix::zeros(4, cols);
                    for (i, (gzi, &zi)) in gz.data_mut().iter_mut().zip(zv.data()).enumerate() {
                        let j = i % cols;
                        let gi = *gzi;
                        *gzi = gi * poly_slope(cv, j, zi);
                        let t = gc.data_mut();
                        t[j] += gi;
                        t[cols + j] += gi * zi;
                        t[2 * cols + j] += gi * zi * zi;
                        t[3 * cols + j] += gi * zi * zi * zi;
                    }
                    accumulate(&mut grads, *z, gz);
                    accumulate(&mut grads, *c, gc);
                }
                Op::PolyDeriv(z, c) => {
                    let (zv, cv) = (val(z), val(c));
                    let cols = zv.cols();
                    let mut gz = g.clone();
                    let mut gc = Matrix::zeros(4, cols);
                    for (i, (gzi, &zi)) in gz.data_mut().iter_mut().zip(zv.data()).enumerate() {
                        let j = i % cols;
                        let gi = *gzi;
                        *gzi = gi * poly_curvature(cv, j, zi);
                        let t = gc.data_mut();
                        t[cols + j] += gi;
                        t[2 * cols + j] += 2.0 * gi * zi;
                        t[3 * cols + j] += 3.0 * gi * zi * zi;
                    }
                    accumulate(&mut grads, *z, gz);
                    accumulate(&mut grads, *c, gc);
                }
                Op::Relu(z) => {
                    let mut gz = g;
                    for (gi, &zi) in gz.data_mut().iter_mut().zip(val(z).data()) {
                        if zi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads, *z, gz);
                }
                Op::Step(_) => {}
                Op::RepeatRows(a, times) => {
                    let av = val(a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let dst = ga.row_mut(r);
                        for k in 0..*times {
                            for (d, s) in dst.iter_mut().zip(g.row(r * times + k)) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(val(b)).expect("shapes fixed at record time");
                    let gb = g.hadamard(val(a)).expect("shapes fixed at record time");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, *a, val(a).scale(s));
                }
                Op::Sum(a) => {
                        let (r, c) = val(a).shape();
                        accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                    }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    mean,
                } => {
                    let mut gl = node.saved.clone().expect("softmax saved at record time");
                    let rows = gl.rows();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = gl.get(r, y);
                        gl.set(r, y, v - 1.0);
                    }
                    let s = if *mean { g.get(0, 0) / rows as f64 } else { g.get(0, 0) };
                    accumulate(&mut grads, *logits, gl.scale(s));
                }
                Op::Combine(terms) => {
                    for (v, c) in terms {
                        accumulate(&mut grads, *v, g.scale(*c));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn check_coeffs(z: &Matrix, c: &Matrix) -> Result<()> {
    if c.rows() != 4 || c.cols() != z.cols() {
        return shape_err(format!(
            "coefficient table {}x{} for {} columns",
            c.rows(),
            c.cols(),
            z.cols()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gauss_init, Rng};

    /// Builds a scalar function of `inputs` on a fresh tape.
    type Build = dyn Fn(&mut GradTape, &[Var]) -> Var;

    fn check_fd(inputs: &[Matrix], build: &Build) {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eval = |ins: &[Matrix]| {
            let mut t = GradTape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar(r)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k], m.rows(), m.cols());
            for i in 0..m.data().len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = g.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-6 * fd.abs().max(1.0),
                    "input {k} entry {i}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn each_primitive_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let a = gauss_init(&mut rng, 3, 4, 1.0).unwrap();
        let w = gauss_init(&mut rng, 2, 4, 1.0).unwrap();
        let b = gauss_init(&mut rng, 1, 2, 1.0).unwrap();
        let c = gauss_init(&mut rng, 4, 2, 0.5).unwrap();

        check_fd(&[a.clone(), w.clone()], &|t, v| {
            let m = t.matmul_t(v[0], v[1]).unwrap();
            t.sum_squares(m).unwrap()
        });
        check_fd(&[a.clone(), w.clone(), b.clone(), c.clone()], &|t, v| {
            let z = t.matmul_t(v[0], v[1]).unwrap();
            let z = t.add_row(z, v[2]).unwrap();
            let h = t.poly(z, v[3]).unwrap();
            let s = t.poly_deriv(z, v[3]).unwrap();
            let hs = t.mul(h, s).unwrap();
            let r = t.repeat_rows(hs, 3).unwrap();
            t.sum_squares(r).unwrap()
        });
        check_fd(&[a.clone(), w.clone()], &|t, v| {
            let z = t.matmul_t(v[0], v[1]).unwrap();
            let r = t.relu(z).unwrap();
            let s = t.step(z).unwrap();
            let m = t.mul(r, s).unwrap();
            let sq = t.sum_squares(m).unwrap();
            let total = t.sum(z).unwrap();
            t.combine(&[(sq, 1.0), (total, -0.5)]).unwrap()
        });
        check_fd(&[a.clone(), w.clone()], &|t, v| {
            let z = t.matmul_t(v[0], v[1]).unwrap();
            let ce = t.softmax_ce(z, &[0, 1, 1], true).unwrap();
            let sq = t.sum_squares(z).unwrap();
            t.combine(&[(ce, 1.0), (sq, 0.25)]).unwrap()
        });
    }

    #[test]
    fn replay_reproduces_values() {
        let mut rng = Rng::new(4);
        let mut t = GradTape::new();
        let a = t.leaf(gauss_init(&mut rng, 5, 3, 1.0).unwrap());
        let w = t.leaf(gauss_init(&mut rng, 4, 3, 1.0).unwrap());
        let c = t.leaf(gauss_init(&mut rng, 4, 4, 1.0).unwrap());
        let z = t.matmul_t(a, w).unwrap();
        let h = t.poly(z, c).unwrap();
        let loss = t.softmax_ce(h, &[0, 1, 2, 3, 0], true).unwrap();
        let replayed = t.replay().unwrap();
        assert_eq!(replayed.len(), t.len());
        assert_eq!(replayed[loss.index()].get(0, 0), t.scalar(loss));
    }

    #[test]
    fn shape_errors_surface_at_record_time() {
        let mut t = GradTape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let w = t.leaf(Matrix::zeros(2, 4));
        assert!(t.matmul_t(a, w).is_err());
        assert!(t.softmax_ce(a, &[0], true).is_err());
        assert!(t.softmax_ce(a, &[0, 5], true).is_err());
    }
}
