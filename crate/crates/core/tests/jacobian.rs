mod common;

use common::{central_diff, rel_err, random_poly_net};
use polydreg::linalg::{gauss_init, Matrix, Rng};
use polydreg::polynet::{dreg_penalty, forward_dual, forward_values, poly_deriv, poly_eval, PolyNetwork};
use proptest::prelude::*;

/// Independent scalar-loop forward for one sample.
fn scalar_forward(net: &PolyNetwork, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in &net.layers {
        let c = layer.coeffs.table();
        let mut next = Vec::new();
        for j in 0..layer.width() {
            let mut z = layer.bias[j];
            for (k, hk) in h.iter().enumerate() {
                z += layer.weights.get(j, k) * hk;
            }
            next.push(c.get(0, j) + c.get(1, j) * z + c.get(2, j) * z * z + c.get(3, j) * z * z * z);
        }
        h = next;
    }
    (0..net.head.weights.rows())
        .map(|i| net.head.bias[i] + (0..h.len()).map(|k| net.head.weights.get(i, k) * h[k]).sum::<f64>())
        .collect()
}

#[test]
fn forward_matches_scalar_loop() {
    let mut rng = Rng::new(5);
    let net = random_poly_net(&mut rng, 4, &[5, 3], 3, 0.2);
    let x = gauss_init(&mut rng, 7, 4, 1.0).unwrap();
    let (logits, _) = forward_values(&net, &x).unwrap();
    for b in 0..7 {
        let want = scalar_forward(&net, x.row(b));
        for (g, w) in logits.row(b).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }
}

#[test]
fn batch_rows_are_independent() {
    let mut rng = Rng::new(6);
    let net = random_poly_net(&mut rng, 3, &[4], 2, 0.2);
    let x = gauss_init(&mut rng, 2, 3, 1.0).unwrap();
    let (both, dual) = forward_dual(&net, &x).unwrap();
    let perm = x.select_rows(&[1, 0]);
    let (swapped, dual_swapped) = forward_dual(&net, &perm).unwrap();
    for b in 0..2 {
        let (single, _) = forward_values(&net, &x.select_rows(&[b])).unwrap();
        assert_eq!(single.row(0), both.row(b));
        assert_eq!(swapped.row(1 - b), both.row(b));
        assert_eq!(dual_swapped.head_jacobian.sample_slice(1 - b), dual.head_jacobian.sample_slice(b));
        assert_eq!(dual_swapped.jacobians[0].sample_slice(1 - b), dual.jacobians[0].sample_slice(b));
    }
}

#[test]
fn penalty_matches_sum_of_squares_loop() {
    let mut rng = Rng::new(8);
    let net = random_poly_net(&mut rng, 3, &[4, 5], 2, 0.3);
    let x = gauss_init(&mut rng, 5, 3, 1.0).unwrap();
    let (_, dual) = forward_dual(&net, &x).unwrap();
    let mut total = 0.0;
    for l in [0, 1] {
        let block = &dual.jacobians[l];
        for b in 0..5 {
            let s = block.sample(b);
            for r in 0..s.rows() {
                for c in 0..s.cols() {
                    total += s.get(r, c) * s.get(r, c);
                }
            }
        }
    }
    let got = dreg_penalty(&dual, &[0, 1]).unwrap();
    assert!((got - total / 10.0).abs() < 1e-12 * total);
}

#[test]
fn hidden_jacobians_match_finite_differences() {
    let mut rng = Rng::new(9);
    let net = random_poly_net(&mut rng, 3, &[4, 2], 2, 0.3);
    let x = gauss_init(&mut rng, 2, 3, 1.0).unwrap();
    let (_, dual) = forward_dual(&net, &x).unwrap();
    for l in 0..2 {
        for b in 0..2 {
            let s = dual.jacobians[l].sample(b);
            for j in 0..s.rows() {
                for k in 0..3 {
                    let fd = central_diff(&x, b, k, 1e-5, |xx| forward_values(&net, xx).unwrap().1.acts[l].get(b, j));
                    assert!(rel_err(s.get(j, k), fd, 1e-4) < 1e-6);
                }
            }
        }
    }
}

#[test]
fn derivative_is_lipschitz_on_bounded_range() {
    // |φ′(z₁) − φ′(z₂)| ≤ (2|c2| + 6|c3|·R)·|z₁ − z₂| for |z| ≤ R
    let coeffs = polydreg::polynet::ActivationCoeffs::new(vec![0.3], vec![1.0], vec![-0.7], vec![0.4]).unwrap();
    let r = 3.0;
    let k = 2.0 * 0.7 + 6.0 * 0.4 * r;
    let mut z = -r;
    while z < r {
        let eps = 1e-3;
        let a = poly_deriv(&coeffs, &Matrix::filled(1, 1, z), 1).unwrap().get(0, 0);
        let b = poly_deriv(&coeffs, &Matrix::filled(1, 1, z + eps), 1).unwrap().get(0, 0);
        assert!((a - b).abs() <= k * eps + 1e-15);
        z += 0.01;
    }
    let v = poly_eval(&coeffs, &Matrix::filled(1, 1, 0.0)).unwrap();
    assert_eq!(v.get(0, 0), 0.3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn head_jacobian_matches_finite_differences(
        seed in any::<u64>(),
        d in 1usize..=8,
        widths in prop::collection::vec(1usize..=16, 1..=4),
        classes in 1usize..=4,
    ) {
        let mut rng = Rng::new(seed);
        let net = random_poly_net(&mut rng, d, &widths, classes, 0.2);
        let x = gauss_init(&mut rng, 2, d, 1.0).unwrap();
        let (_, dual) = forward_dual(&net, &x).unwrap();
        for b in 0..2 {
            let hj = dual.head_jacobian.sample(b);
            for i in 0..classes {
                for k in 0..d {
                    let fd = central_diff(&x, b, k, 1e-5, |xx| forward_values(&net, xx).unwrap().0.get(b, i));
                    let e = rel_err(hj.get(i, k), fd, 1e-4);
                    prop_assert!(e <= 1e-6, "entry ({i},{k}) of sample {b}: {} vs {fd} (err {e})", hj.get(i, k));
                }
            }
        }
    }
}
