//! Finite-difference checks of every layer's backward pass.

use rand::Rng;

use super::densenet::{self, DenseNetConfig};
use super::layers::*;
use super::resnet::{self, BlockKind, ResNetConfig, SqueezeExcite};
use super::tensor::Tensor;
use crate::rng::{substream, Stream};

fn random_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(layer: &mut dyn Layer, x: &Tensor, g: &Tensor, pass: Pass) -> f64 {
    let out = layer.forward(x, Pass { record: false, ..pass });
    out.data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// Compares analytic input and weight gradients of `sum(layer(x) * g)` with
/// central differences at up to `samples` coordinates per tensor. Returns
/// the fraction of compared coordinates outside tolerance.
fn mismatch_rate(
    layer: &mut dyn Layer,
    x: &Tensor,
    pass: Pass,
    samples: usize,
    check_input: bool,
) -> f64 {
    let mut rng = substream(2, "gradcheck", &[]);
    let eps = 5e-4f32;
    let out = layer.forward(x, pass);
    let g = random_tensor(out.shape(), &mut rng);
    {
        let mut ps = Vec::new();
        layer.params_mut(&mut ps);
        ps.into_iter().for_each(|p| p.zero_grad());
    }
    let dx = layer.backward(&g);
    let mut grads: Vec<Vec<f32>> = Vec::new();
    {
        let mut ps = Vec::new();
        layer.params(&mut ps);
        for p in ps {
            grads.push(if p.trainable { p.grad.clone() } else { Vec::new() });
        }
    }

    let close = |a: f64, n: f64| (a - n).abs() <= 2e-3 + 2e-2 * a.abs().max(n.abs());
    let (mut total, mut bad) = (0usize, 0usize);

    let mut xp = x.clone();
    let input_samples = if check_input { samples.min(x.len()) } else { 0 };
    for _ in 0..input_samples {
        let i = rng.random_range(0..x.len());
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let lp = loss(layer, &xp, &g, pass);
        xp.data_mut()[i] = orig - eps;
        let lm = loss(layer, &xp, &g, pass);
        xp.data_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * f64::from(eps));
        total += 1;
        if !close(f64::from(dx.data()[i]), num) {
            bad += 1;
        }
    }

    let n_params = grads.len();
    for pi in 0..n_params {
        if grads[pi].is_empty() {
            continue;
        }
        let len = grads[pi].len();
        for _ in 0..samples.min(len) {
            let i = rng.random_range(0..len);
            let set = |layer: &mut dyn Layer, delta: f32| {
                let mut ps = Vec::new();
                layer.params_mut(&mut ps);
                ps.into_iter().nth(pi).unwrap().value[i] += delta;
            };
            set(layer, eps);
            let lp = loss(layer, x, &g, pass);
            set(layer, -2.0 * eps);
            let lm = loss(layer, x, &g, pass);
            set(layer, eps);
            let num = (lp - lm) / (2.0 * f64::from(eps));
            total += 1;
            if !close(f64::from(grads[pi][i]), num) {
                bad += 1;
            }
        }
    }
    bad as f64 / total as f64
}

fn assert_exact(layer: &mut dyn Layer, shape: &[usize], pass: Pass) {
    let x = random_tensor(shape, &mut substream(1, "x", &[]));
    let rate = mismatch_rate(layer, &x, pass, 40, true);
    assert_eq!(rate, 0.0);
}

/// Layers with ReLU/max-pool kinks may straddle a kink for a few probes.
fn assert_mostly(layer: &mut dyn Layer, shape: &[usize], pass: Pass) {
    let x = random_tensor(shape, &mut substream(1, "x", &[]));
    let rate = mismatch_rate(layer, &x, pass, 25, true);
    assert!(rate <= 0.02, "mismatch rate {rate}");
}

/// Whole networks run with stored normalization statistics, which makes
/// them piecewise linear (up to SE gates); train-mode normalization is
/// covered per layer above. Single-coordinate probes may still straddle one
/// of the many ReLU kinks.
fn assert_network(layer: &mut dyn Layer, shape: &[usize]) {
    let x = random_tensor(shape, &mut substream(1, "x", &[]));
    // move running statistics away from their init so eval mode is nontrivial
    layer.forward(&x, Pass { train: true, record: false });
    let rate = mismatch_rate(layer, &x, Pass { train: false, record: true }, 25, false);
    assert!(rate <= 0.02, "mismatch rate {rate}");
}

#[test]
fn conv_strided_padded_with_bias() {
    let mut rng = substream(0, "init", &[]);
    let mut conv = Conv2d::new("c", ConvShape::new(3, 4, 3, 2, 1), true, &mut rng);
    assert_exact(&mut conv, &[2, 3, 7, 6], Pass::TRAIN);
}

#[test]
fn conv_grouped() {
    let mut rng = substream(0, "init", &[]);
    let mut conv = Conv2d::new("c", ConvShape::new(4, 6, 3, 1, 1).grouped(2), false, &mut rng);
    assert_exact(&mut conv, &[2, 4, 5, 5], Pass::TRAIN);
}

#[test]
fn conv_pointwise_strided() {
    let mut rng = substream(0, "init", &[]);
    let mut conv = Conv2d::new("c", ConvShape::new(3, 5, 1, 2, 0), false, &mut rng);
    assert_exact(&mut conv, &[2, 3, 6, 6], Pass::TRAIN);
    let mut conv = Conv2d::new("c", ConvShape::new(3, 5, 1, 1, 0), true, &mut rng);
    assert_exact(&mut conv, &[2, 3, 4, 5], Pass::TRAIN);
}

#[test]
fn batchnorm_batch_statistics() {
    let mut bn = BatchNorm2d::new("bn", 3);
    let mut ps = Vec::new();
    bn.params_mut(&mut ps);
    let mut rng = substream(5, "bn", &[]);
    for p in ps {
        if p.trainable {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    assert_exact(&mut bn, &[3, 3, 4, 4], Pass::TRAIN);
}

#[test]
fn batchnorm_running_statistics() {
    let mut bn = BatchNorm2d::new("bn", 3);
    // populate running stats first
    bn.forward(&random_tensor(&[4, 3, 4, 4], &mut substream(9, "x", &[])), Pass::TRAIN);
    assert_exact(&mut bn, &[2, 3, 4, 4], Pass { train: false, record: true });
}

#[test]
fn pools_and_linear() {
    let rec = Pass { train: false, record: true };
    assert_mostly(&mut MaxPool2d::new(3, 2, 1), &[2, 3, 7, 7], rec);
    assert_exact(&mut AvgPool2d::new(2), &[2, 3, 6, 4], rec);
    assert_exact(&mut GlobalAvgPool::new(), &[2, 3, 5, 3], rec);
    let mut rng = substream(0, "init", &[]);
    assert_exact(&mut Linear::new("fc", 6, 2, &mut rng), &[3, 6], Pass::TRAIN);
}

#[test]
fn squeeze_excite() {
    let mut rng = substream(0, "init", &[]);
    let mut se = SqueezeExcite::new("se", 8, 2, &mut rng);
    assert_mostly(&mut se, &[2, 8, 3, 3], Pass::TRAIN);
}

#[test]
fn tiny_resnet_basic() {
    let cfg = ResNetConfig {
        stem: 4,
        planes: [4, 6, 6, 8],
        depths: [1, 1, 1, 1],
        block: BlockKind::Basic,
    };
    let mut net = resnet::build(&cfg, &mut substream(0, "init", &[]));
    assert_network(&mut net, &[2, 3, 32, 32]);
}

#[test]
fn tiny_resnet_se_bottleneck() {
    let cfg = ResNetConfig {
        stem: 4,
        planes: [4, 4, 4, 4],
        depths: [1, 2, 1, 1],
        block: BlockKind::SeBottleneck {
            groups: 2,
            base_width: 32,
            se_reduction: 4,
        },
    };
    let mut net = resnet::build(&cfg, &mut substream(0, "init", &[]));
    assert_network(&mut net, &[2, 3, 32, 32]);
}

#[test]
fn tiny_densenet() {
    let cfg = DenseNetConfig {
        growth: 3,
        init_features: 4,
        blocks: [2, 1, 2, 1],
        bn_size: 2,
    };
    let mut net = densenet::build(&cfg, &mut substream(0, "init", &[]));
    assert_network(&mut net, &[2, 3, 32, 32]);
}
