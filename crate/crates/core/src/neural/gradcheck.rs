//! Central finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::Layer;
use super::graph::{BnStats, Graph, ParamKind};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Check input and parameter gradients of `L = sum(r * out)`.
fn check(layers: &[Layer], rows: usize, b: usize, rng: &mut ChaCha8Rng) -> f64 {
    let g = Graph::compile_layers(rows, layers).unwrap();
    let mut params: Vec<Vec<f64>> = g
        .params
        .iter()
        .map(|p| match p.kind {
            ParamKind::Scale => random_vec(rng, p.len).iter().map(|v| 1.0 + 0.5 * v).collect(),
            _ => random_vec(rng, p.len),
        })
        .collect();
    let stats: Vec<BnStats> = g.stat_channels.iter().map(|&c| BnStats { mean: vec![0.0; c], var: vec![1.0; c] }).collect();
    let x = random_vec(rng, b * g.input_dims().per_sample());
    let tape = g.forward(&params, &stats, &x, b, true).unwrap();
    let r = random_vec(rng, tape.output().len());
    let (dx, dp) = g.backward(&params, &tape, &r).unwrap();

    let loss = |params: &[Vec<f64>], x: &[f64]| -> f64 {
        let t = g.forward(params, &stats, x, b, true).unwrap();
        t.output().iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += H;
        xm[i] -= H;
        let num = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * H);
        worst = worst.max(rel_err(dx[i], num));
    }
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let v = params[p][i];
            params[p][i] = v + H;
            let lp = loss(&params, &x);
            params[p][i] = v - H;
            let lm = loss(&params, &x);
            params[p][i] = v;
            worst = worst.max(rel_err(dp[p][i], (lp - lm) / (2.0 * H)));
        }
    }
    worst
}

fn kernel(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

fn run(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Layer>, min_batch: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..20 {
        let layers = make(&mut rng);
        let rows = rng.random_range(1..=3);
        let b = rng.random_range(min_batch..=3);
        let err = check(&layers, rows, b, &mut rng);
        assert!(err < TOL, "{name} trial {trial}: rel err {err:e} for {layers:?}");
    }
}

#[test]
fn conv() {
    run(
        "conv",
        1,
        |r| vec![Layer::Conv2d { out: r.random_range(1..=3), kernel: kernel(r) }, Layer::Conv2d { out: r.random_range(1..=3), kernel: kernel(r) }],
        1,
    );
}

#[test]
fn dense() {
    run("dense", 2, |r| vec![Layer::Conv2d { out: 2, kernel: kernel(r) }, Layer::Dense { out: r.random_range(1..=5) }], 1);
}

#[test]
fn batch_norm() {
    run("batchnorm", 3, |r| vec![Layer::Conv2d { out: r.random_range(1..=3), kernel: kernel(r) }, Layer::BatchNorm], 2);
}

#[test]
fn relu() {
    run("relu", 4, |r| vec![Layer::Conv2d { out: 3, kernel: kernel(r) }, Layer::Relu, Layer::Conv2d { out: 2, kernel: (1, 1) }], 1);
}

#[test]
fn inception_with_pooling() {
    run(
        "inception",
        5,
        |r| vec![Layer::Conv2d { out: 2, kernel: (1, 1) }, Layer::Inception { out: r.random_range(1..=8), k_a: kernel(r), k_b: kernel(r) }],
        1,
    );
}

#[test]
fn skip_concat() {
    run(
        "concat",
        6,
        |r| vec![Layer::Conv2d { out: 2, kernel: kernel(r) }, Layer::Conv2d { out: 3, kernel: kernel(r) }, Layer::SkipConcat { from: 0 }],
        1,
    );
}

#[test]
fn adaptive_pool() {
    run(
        "avgpool",
        7,
        |r| vec![Layer::Conv2d { out: 2, kernel: kernel(r) }, Layer::AdaptiveAvgPool { h: r.random_range(1..=5), w: r.random_range(1..=5) }],
        1,
    );
}

#[test]
fn full_sc_net_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = super::ConvNetSpec::student(2, 1, &[3, 2, 2, 2]).unwrap();
    let arch = spec.arch("t").unwrap();
    let err = check(&arch.layers, arch.input_rows, 3, &mut rng);
    assert!(err < TOL, "{err:e}");
}
