mod common;

use polydreg::baselines::BaselineNet;
use polydreg::data::{stratified_split, two_blobs};
use polydreg::linalg::Rng;
use polydreg::polynet::PolyNetwork;
use polydreg::train::{train, Batch, TrainConfig, Trainable, INIT_STREAM};
use polydreg::Error;

struct Blobs {
    xtr: polydreg::Matrix,
    ytr: Vec<usize>,
    xev: polydreg::Matrix,
    yev: Vec<usize>,
}

fn blobs(seed: u64) -> Blobs {
    let ds = two_blobs(200, 2, seed).unwrap();
    let split = stratified_split(&ds.labels, 2, 0.2, seed).unwrap();
    let (xtr, ytr) = ds.select(&split.train);
    let (xev, yev) = ds.select(&split.eval);
    Blobs { xtr, ytr, xev, yev }
}

fn fit<N: Trainable>(net: N, b: &Blobs, cfg: &TrainConfig) -> polydreg::train::Trained<N> {
    train(net, Batch { x: &b.xtr, labels: &b.ytr }, Batch { x: &b.xev, labels: &b.yev }, cfg).unwrap()
}

fn poly(seed: u64) -> PolyNetwork {
    PolyNetwork::new(2, &[8, 8], 2, &mut Rng::stream(seed, INIT_STREAM)).unwrap()
}

#[test]
fn same_seed_same_parameters_and_log() {
    let b = blobs(1);
    let cfg = TrainConfig { epochs: 5, seed: 3, ..TrainConfig::default() };
    let a = fit(poly(3), &b, &cfg);
    let c = fit(poly(3), &b, &cfg);
    assert_eq!(a.model, c.model);
    assert_eq!(a.log, c.log);
    let base_cfg = TrainConfig { dropout_rate: 0.2, ..cfg.clone() };
    let mk = || BaselineNet::new(2, &[8], 2, 0.2, &mut Rng::stream(3, INIT_STREAM)).unwrap();
    assert_eq!(fit(mk(), &b, &base_cfg).model, fit(mk(), &b, &base_cfg).model);
}

#[test]
fn blob_accuracy_within_fifty_epochs() {
    let b = blobs(2);
    let cfg = TrainConfig { epochs: 50, learning_rate: 1e-2, ..TrainConfig::default() };
    let out = fit(poly(0), &b, &cfg);
    let acc = out.log.last().unwrap().eval_accuracy;
    assert!(acc >= 0.95, "accuracy {acc}");
    let base = BaselineNet::new(2, &[8, 8], 2, 0.0, &mut Rng::stream(0, INIT_STREAM)).unwrap();
    let acc = fit(base, &b, &TrainConfig { lambda_dreg: 0.0, ..cfg }).log.last().unwrap().eval_accuracy;
    assert!(acc >= 0.95, "baseline accuracy {acc}");
}

#[test]
fn penalty_is_monotone_in_lambda() {
    let b = blobs(4);
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.1, 1.0, 10.0] {
        let cfg = TrainConfig { lambda_dreg: lambda, epochs: 30, learning_rate: 1e-2, seed: 5, ..TrainConfig::default() };
        let out = fit(poly(5), &b, &cfg);
        let pen = out.model.penalty(&b.xtr, false).unwrap();
        assert!(pen <= last, "lambda {lambda}: {pen} > {last}");
        last = pen;
    }
}

#[test]
fn large_lambda_shrinks_penalty() {
    let b = blobs(6);
    let run = |lambda: f64| {
        let cfg = TrainConfig { lambda_dreg: lambda, epochs: 20, learning_rate: 1e-2, seed: 7, ..TrainConfig::default() };
        fit(poly(7), &b, &cfg).model.penalty(&b.xtr, false).unwrap()
    };
    assert!(run(1e3) < run(0.0));
}

#[test]
fn logged_quantities_are_consistent() {
    let b = blobs(8);
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let out = fit(poly(8), &b, &cfg);
    assert_eq!(out.log.epochs.len(), 3);
    for (i, e) in out.log.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert!(e.task_loss.is_finite() && e.penalty > 0.0);
        assert!((0.0..=1.0).contains(&e.eval_accuracy));
    }
}

#[test]
fn early_stopping_restores_best_epoch() {
    let b = blobs(9);
    let cfg = TrainConfig { epochs: 40, learning_rate: 1e-2, early_stopping_patience: Some(3), ..TrainConfig::default() };
    let out = fit(poly(9), &b, &cfg);
    let kept = out.log.restored_epoch.unwrap();
    let best = out.log.epochs.iter().map(|e| e.eval_accuracy).fold(0.0, f64::max);
    assert_eq!(out.log.epochs[kept].eval_accuracy, best);
}

#[test]
fn divergence_is_reported_with_position() {
    let b = blobs(10);
    let mut net = poly(10);
    for l in &mut net.layers {
        l.coeffs = polydreg::ActivationCoeffs::uniform(l.width(), [0.0, 1.0, 0.0, 50.0]);
    }
    let cfg = TrainConfig { epochs: 5, learning_rate: 10.0, optimizer: polydreg::train::OptimizerKind::Sgd, ..TrainConfig::default() };
    let res = train(net, Batch { x: &b.xtr, labels: &b.ytr }, Batch { x: &b.xev, labels: &b.yev }, &cfg);
    assert!(matches!(res, Err(Error::Diverged { .. })), "{res:?}");
}
