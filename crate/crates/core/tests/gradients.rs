mod common;

use common::{central_diff, random_labels, random_poly_net, rel_err};
use polydreg::baselines::{baseline_forward, baseline_input_grads, BaselineNet, Mode};
use polydreg::linalg::{gauss_init, Matrix, Rng};
use polydreg::metrics::{input_grad_norms, GradTarget, InputGradients};
use polydreg::polynet::{ActivationCoeffs, Dense};
use polydreg::tape::cross_entropy_rows;
use polydreg::train::{loss_and_grads, ParamKind, TrainConfig, Trainable};

const H: f64 = 1e-5;

fn cfg(lambda: f64, include_head: bool) -> TrainConfig {
    TrainConfig { lambda_dreg: lambda, penalty_include_head: include_head, ..TrainConfig::default() }
}

/// Checks every parameter entry against central differences of the full
/// objective; returns the worst relative error.
fn worst_param_error<N: Trainable>(net: &N, x: &Matrix, labels: &[usize], cfg: &TrainConfig) -> f64 {
    let analytic = loss_and_grads(net, x, labels, cfg, false, None).unwrap();
    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    let mut worst: f64 = 0.0;
    for (p, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = net.clone();
            plus.param_slices_mut()[p][i] += H;
            let mut minus = net.clone();
            minus.param_slices_mut()[p][i] -= H;
            let lp = loss_and_grads(&plus, x, labels, cfg, false, None).unwrap().loss;
            let lm = loss_and_grads(&minus, x, labels, cfg, false, None).unwrap().loss;
            let fd = (lp - lm) / (2.0 * H);
            let a = analytic.grads[p].data()[i];
            worst = worst.max(rel_err(a, fd, 1e-4));
        }
    }
    worst
}

#[test]
fn full_objective_gradients_for_every_lambda_and_parameter_class() {
    for (seed, widths) in [(1u64, vec![4, 3]), (2, vec![6]), (3, vec![3, 3, 2])] {
        let mut rng = Rng::new(seed);
        let net = random_poly_net(&mut rng, 3, &widths, 3, 0.3);
        assert!(net.num_params() <= 500);
        let kinds: Vec<ParamKind> = net.param_info().iter().map(|p| p.kind).collect();
        for k in [ParamKind::Weight, ParamKind::Bias, ParamKind::Coeffs] {
            assert!(kinds.contains(&k));
        }
        let x = gauss_init(&mut rng, 5, 3, 1.0).unwrap();
        let labels = random_labels(&mut rng, 5, 3);
        for lambda in [0.0, 0.01, 0.1, 1.0] {
            for head in [false, true] {
                let e = worst_param_error(&net, &x, &labels, &cfg(lambda, head));
                assert!(e <= 1e-5, "widths {widths:?}, lambda {lambda}, head {head}: {e}");
            }
        }
    }
}

#[test]
fn objective_decomposes_and_lambda_zero_is_plain_cross_entropy() {
    let mut rng = Rng::new(4);
    let net = random_poly_net(&mut rng, 3, &[4], 2, 0.3);
    let x = gauss_init(&mut rng, 6, 3, 1.0).unwrap();
    let labels = random_labels(&mut rng, 6, 2);
    for lambda in [0.0, 0.3, 2.0] {
        let out = loss_and_grads(&net, &x, &labels, &cfg(lambda, false), false, None).unwrap();
        assert!((out.loss - (out.task_loss + lambda * out.penalty)).abs() <= 1e-12 * out.loss.abs().max(1.0));
        assert!(out.penalty > 0.0);
    }
    let out = loss_and_grads(&net, &x, &labels, &cfg(0.0, false), false, None).unwrap();
    let ce = cross_entropy_rows(&net.logits(&x).unwrap(), &labels);
    assert_eq!(out.loss, out.task_loss);
    assert!((out.loss - ce.iter().sum::<f64>() / 6.0).abs() < 1e-14);
}

#[test]
fn constant_layer_has_zero_penalty_gradient_in_weights() {
    let mut rng = Rng::new(5);
    let mut net = random_poly_net(&mut rng, 3, &[4], 2, 0.3);
    net.layers[0].coeffs = ActivationCoeffs::uniform(4, [0.5, 0.0, 0.0, 0.0]);
    let x = gauss_init(&mut rng, 4, 3, 1.0).unwrap();
    let labels = random_labels(&mut rng, 4, 2);
    let with = loss_and_grads(&net, &x, &labels, &cfg(1.0, false), false, None).unwrap();
    let without = loss_and_grads(&net, &x, &labels, &cfg(0.0, false), false, None).unwrap();
    assert_eq!(with.penalty, 0.0);
    // first-layer weights receive no gradient from either term
    assert!(with.grads[0].data().iter().all(|v| *v == 0.0));
    assert_eq!(with.grads[0], without.grads[0]);
}

fn relu_net_away_from_kinks(rng: &mut Rng, x: &Matrix, widths: &[usize], dropout: f64) -> BaselineNet {
    loop {
        let net = BaselineNet::new(x.cols(), widths, 3, dropout, rng).unwrap();
        let (_, cache) = baseline_forward(&net, x, Mode::Eval, None).unwrap();
        if cache.preacts.iter().all(|z| z.data().iter().all(|v| v.abs() > 1e-3)) {
            return net;
        }
    }
}

#[test]
fn baseline_parameter_gradients_with_and_without_penalty() {
    let mut rng = Rng::new(6);
    let x = gauss_init(&mut rng, 5, 4, 1.0).unwrap();
    let labels = random_labels(&mut rng, 5, 3);
    let net = relu_net_away_from_kinks(&mut rng, &x, &[5, 4], 0.0);
    for lambda in [0.0, 0.1, 1.0] {
        let e = worst_param_error(&net, &x, &labels, &cfg(lambda, false));
        assert!(e <= 1e-5, "lambda {lambda}: {e}");
    }
}

#[test]
fn baseline_input_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    let x = gauss_init(&mut rng, 6, 4, 1.0).unwrap();
    let labels = random_labels(&mut rng, 6, 3);
    let net = relu_net_away_from_kinks(&mut rng, &x, &[6, 5], 0.2);
    let g = net.input_gradients(&x, &labels, GradTarget::Loss).unwrap();
    for b in 0..6 {
        for k in 0..4 {
            let fd = central_diff(&x, b, k, H, |xx| {
                cross_entropy_rows(&net.logits(xx).unwrap(), &labels)[b]
            });
            assert!(rel_err(g.get(b, k), fd, 1e-4) <= 1e-5);
        }
    }
    let norms = baseline_input_grads(&net, &x, &labels).unwrap();
    for (b, norm) in norms.iter().enumerate() {
        let n = g.row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - n).abs() < 1e-15);
    }
}

#[test]
fn single_linear_layer_closed_form() {
    // logits = W₂·relu(W₁x + b₁) + b₂ with W₁ = I and b₁ large keeps every unit
    // active, so ∂loss/∂x = (softmax − onehot)ᵀ·W₂·W₁
    let w1 = Matrix::identity(3);
    let layer = Dense::new(w1, vec![100.0; 3]).unwrap();
    let w2 = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.1, -1.0]]);
    let head = Dense::new(w2.clone(), vec![0.0, 0.0]).unwrap();
    let net = BaselineNet::from_parts(3, vec![layer], head, 0.0).unwrap();
    let x = Matrix::from_rows(&[vec![0.2, -0.4, 1.0]]);
    let logits = net.logits(&x).unwrap();
    let (l0, l1) = (logits.get(0, 0), logits.get(0, 1));
    let p0 = 1.0 / (1.0 + (l1 - l0).exp());
    let r = [p0 - 1.0, 1.0 - p0];
    let want: Vec<f64> = (0..3).map(|k| r[0] * w2.get(0, k) + r[1] * w2.get(1, k)).collect();
    let got = net.input_gradients(&x, &[0], GradTarget::Loss).unwrap();
    for (k, w) in want.iter().enumerate() {
        assert!((got.get(0, k) - w).abs() < 1e-12);
    }
}

#[test]
fn poly_input_gradients_match_finite_differences() {
    let mut rng = Rng::new(8);
    let net = random_poly_net(&mut rng, 4, &[6, 5], 3, 0.3);
    let x = gauss_init(&mut rng, 5, 4, 1.0).unwrap();
    let labels = random_labels(&mut rng, 5, 3);
    for target in [GradTarget::Loss, GradTarget::TrueLogit] {
        let g = net.input_gradients(&x, &labels, target).unwrap();
        for b in 0..5 {
            for k in 0..4 {
                let fd = central_diff(&x, b, k, H, |xx| {
                    let logits = net.logits(xx).unwrap();
                    match target {
                        GradTarget::Loss => cross_entropy_rows(&logits, &labels)[b],
                        GradTarget::TrueLogit => logits.get(b, labels[b]),
                    }
                });
                assert!(rel_err(g.get(b, k), fd, 1e-4) <= 1e-5, "{target:?}");
            }
        }
    }
}

#[test]
fn baseline_true_logit_gradients_match_finite_differences() {
    let mut rng = Rng::new(9);
    let x = gauss_init(&mut rng, 4, 3, 1.0).unwrap();
    let labels = random_labels(&mut rng, 4, 3);
    let net = relu_net_away_from_kinks(&mut rng, &x, &[5], 0.0);
    let g = net.input_gradients(&x, &labels, GradTarget::TrueLogit).unwrap();
    for (b, &label) in labels.iter().enumerate() {
        for k in 0..3 {
            let fd = central_diff(&x, b, k, H, |xx| net.logits(xx).unwrap().get(b, label));
            assert!(rel_err(g.get(b, k), fd, 1e-4) <= 1e-5);
        }
    }
}

#[test]
fn zero_weight_models_have_zero_norms() {
    let mut rng = Rng::new(10);
    let mut net = random_poly_net(&mut rng, 3, &[4], 2, 0.3);
    net.head.weights = Matrix::zeros(2, 4);
    let x = gauss_init(&mut rng, 5, 3, 1.0).unwrap();
    let labels = random_labels(&mut rng, 5, 2);
    let norms = input_grad_norms(&net, &x, &labels, GradTarget::Loss).unwrap();
    assert!(norms.iter().all(|v| *v == 0.0));
    assert!(polydreg::metrics::tail_ratio(&norms).is_err());
    let single = input_grad_norms(&random_poly_net(&mut rng, 3, &[4], 2, 0.3), &x.select_rows(&[0]), &labels[..1], GradTarget::Loss).unwrap();
    assert_eq!(polydreg::metrics::tail_ratio(&single).unwrap().tau, 1.0);
}

#[test]
fn dropout_average_approximates_eval_forward() {
    let mut rng = Rng::new(11);
    let net = BaselineNet::new(4, &[64], 2, 0.2, &mut rng).unwrap();
    let x = Matrix::from_rows(&[vec![0.5, -1.0, 1.5, 0.3]]);
    let (eval, _) = baseline_forward(&net, &x, Mode::Eval, None).unwrap();
    let mut acc = Matrix::zeros(1, 2);
    let mut drng = Rng::new(12);
    let draws = 10_000;
    for _ in 0..draws {
        let (l, _) = baseline_forward(&net, &x, Mode::Train, Some(&mut drng)).unwrap();
        acc = acc.add(&l).unwrap();
    }
    let mean = acc.scale(1.0 / draws as f64);
    let num = mean.sub(&eval).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = eval.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(num / den < 0.02, "relative gap {}", num / den);
}
