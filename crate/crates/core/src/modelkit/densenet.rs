//! Densely connected network (DenseNet-121 layout), torchvision naming.

use super::layers::{
    AvgPool2d, BatchNorm2d, Conv2d, ConvShape, GlobalAvgPool, Layer, MaxPool2d, Pass, Relu,
    Sequential,
};
use super::tensor::{Param, Tensor};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseNetConfig {
    pub growth: usize,
    pub init_features: usize,
    pub blocks: [usize; 4],
    pub bn_size: usize,
}

impl DenseNetConfig {
    pub const DENSENET121: DenseNetConfig = DenseNetConfig {
        growth: 32,
        init_features: 64,
        blocks: [6, 12, 24, 16],
        bn_size: 4,
    };

    pub fn feature_width(&self) -> usize {
        let mut c = self.init_features;
        for (i, &n) in self.blocks.iter().enumerate() {
            c += n * self.growth;
            if i + 1 < self.blocks.len() {
                c /= 2;
            }
        }
        c
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.nchw();
    let (_, cb, _, _) = b.nchw();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape")
}

/// Splits channel dim at `at` into (first `at` channels, the rest).
fn split_channels(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = t.nchw();
    let hw = h * w;
    let mut a = Vec::with_capacity(n * at * hw);
    let mut b = Vec::with_capacity(n * (c - at) * hw);
    for i in 0..n {
        let s = &t.data()[i * c * hw..(i + 1) * c * hw];
        a.extend_from_slice(&s[..at * hw]);
        b.extend_from_slice(&s[at * hw..]);
    }
    (
        Tensor::from_vec(&[n, at, h, w], a).expect("split"),
        Tensor::from_vec(&[n, c - at, h, w], b).expect("split"),
    )
}

struct DenseBlock {
    layers: Vec<(usize, Sequential)>,
}

impl DenseBlock {
    fn new(prefix: &str, cfg: &DenseNetConfig, in_c: usize, n_layers: usize, rng: &mut Stream) -> Self {
        let inner = cfg.bn_size * cfg.growth;
        let layers = (0..n_layers)
            .map(|i| {
                let c = in_c + i * cfg.growth;
                let p = format!("{prefix}.denselayer{}", i + 1);
                let mut seq = Sequential::new();
                seq.push(BatchNorm2d::new(&format!("{p}.norm1"), c))
                    .push(Relu::new())
                    .push(Conv2d::new(
                        &format!("{p}.conv1"),
                        ConvShape::new(c, inner, 1, 1, 0),
                        false,
                        rng,
                    ))
                    .push(BatchNorm2d::new(&format!("{p}.norm2"), inner))
                    .push(Relu::new())
                    .push(Conv2d::new(
                        &format!("{p}.conv2"),
                        ConvShape::new(inner, cfg.growth, 3, 1, 1),
                        false,
                        rng,
                    ));
                (c, seq)
            })
            .collect();
        Self { layers }
    }
}

impl Layer for DenseBlock {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut feats = x.clone();
        for (_, layer) in &mut self.layers {
            let new = layer.forward(&feats, pass);
            feats = concat_channels(&feats, &new);
        }
        feats
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (in_c, layer) in self.layers.iter_mut().rev() {
            let (mut g_prev, g_new) = split_channels(&g, *in_c);
            g_prev.add_assign(&layer.backward(&g_new));
            g = g_prev;
        }
        g
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for (_, l) in &self.layers {
            l.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for (_, l) in &mut self.layers {
            l.params_mut(out);
        }
    }
}

/// Feature extractor `[n, 3, h, w] -> [n, feature_width]`.
pub fn build(cfg: &DenseNetConfig, rng: &mut Stream) -> Sequential {
    let mut body = Sequential::new();
    body.push(
        Conv2d::new(
            "features.conv0",
            ConvShape::new(3, cfg.init_features, 7, 2, 3),
            false,
            rng,
        )
        .without_input_grad(),
    )
    .push(BatchNorm2d::new("features.norm0", cfg.init_features))
    .push(Relu::new())
    .push(MaxPool2d::new(3, 2, 1));
    let mut c = cfg.init_features;
    for (i, &n) in cfg.blocks.iter().enumerate() {
        body.push(DenseBlock::new(
            &format!("features.denseblock{}", i + 1),
            cfg,
            c,
            n,
            rng,
        ));
        c += n * cfg.growth;
        if i + 1 < cfg.blocks.len() {
            let p = format!("features.transition{}", i + 1);
            body.push(BatchNorm2d::new(&format!("{p}.norm"), c))
                .push(Relu::new())
                .push(Conv2d::new(
                    &format!("{p}.conv"),
                    ConvShape::new(c, c / 2, 1, 1, 0),
                    false,
                    rng,
                ))
                .push(AvgPool2d::new(2));
            c /= 2;
        }
    }
    body.push(BatchNorm2d::new("features.norm5", c))
        .push(Relu::new())
        .push(GlobalAvgPool::new());
    body
}
