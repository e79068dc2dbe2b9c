#![allow(dead_code)]

use polydreg::linalg::{gauss_init, Matrix, Rng};
use polydreg::polynet::{ActivationCoeffs, Dense, PolyLayer, PolyNetwork};

/// Polynomial network with every coefficient drawn at random:
/// c1 ~ 1 + N(0, s²), c0, c2, c3 ~ N(0, s²).
pub fn random_poly_net(rng: &mut Rng, d: usize, widths: &[usize], classes: usize, s: f64) -> PolyNetwork {
    let mut layers = Vec::new();
    let mut fan_in = d;
    for &w in widths {
        let weights = gauss_init(rng, w, fan_in, 1.0 / (fan_in as f64).sqrt()).unwrap();
        let bias = (0..w).map(|_| 0.1 * rng.normal()).collect();
        let mut draw = |base: f64| (0..w).map(|_| base + s * rng.normal()).collect::<Vec<f64>>();
        let (c0, c1, c2, c3) = (draw(0.0), draw(1.0), draw(0.0), draw(0.0));
        let coeffs = ActivationCoeffs::new(c0, c1, c2, c3).unwrap();
        layers.push(PolyLayer::new(weights, bias, coeffs).unwrap());
        fan_in = w;
    }
    let head_w = gauss_init(rng, classes, fan_in, 1.0 / (fan_in as f64).sqrt()).unwrap();
    let head_b = (0..classes).map(|_| 0.1 * rng.normal()).collect();
    PolyNetwork::from_parts(d, layers, Dense::new(head_w, head_b).unwrap()).unwrap()
}

pub fn random_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries that are zero
/// up to rounding from dominating.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central difference of `f` with respect to entry `(r, c)` of `x`.
pub fn central_diff(x: &Matrix, r: usize, c: usize, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> f64 {
    let mut xp = x.clone();
    xp.set(r, c, x.get(r, c) + h);
    let mut xm = x.clone();
    xm.set(r, c, x.get(r, c) - h);
    (f(&xp) - f(&xm)) / (2.0 * h)
}
