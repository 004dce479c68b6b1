//! Residual networks: the basic-block ResNet-18 and the squeeze-excitation
//! ResNeXt-50 (32x4d) bottleneck variant. Parameter names follow the
//! torchvision/timm state dicts so published checkpoints load unchanged.

use super::layers::{
    BatchNorm2d, Conv2d, ConvShape, GlobalAvgPool, Layer, MaxPool2d, Pass, Relu, Sequential,
};
use super::tensor::{Param, Tensor};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    /// ResNeXt bottleneck with squeeze-excitation; expansion 4.
    SeBottleneck {
        groups: usize,
        base_width: usize,
        se_reduction: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub stem: usize,
    pub planes: [usize; 4],
    pub depths: [usize; 4],
    pub block: BlockKind,
}

impl ResNetConfig {
    pub const RESNET18: ResNetConfig = ResNetConfig {
        stem: 64,
        planes: [64, 128, 256, 512],
        depths: [2, 2, 2, 2],
        block: BlockKind::Basic,
    };

    pub const SE_RESNEXT50_32X4D: ResNetConfig = ResNetConfig {
        stem: 64,
        planes: [64, 128, 256, 512],
        depths: [3, 4, 6, 3],
        block: BlockKind::SeBottleneck {
            groups: 32,
            base_width: 4,
            se_reduction: 16,
        },
    };

    pub fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::SeBottleneck { .. } => 4,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.planes[3] * self.expansion()
    }
}

struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Downsample {
    fn new(prefix: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut Stream) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{prefix}.downsample.0"),
                ConvShape::new(in_c, out_c, 1, stride, 0),
                false,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{prefix}.downsample.1"), out_c),
        }
    }

    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let h = self.conv.forward(x, pass);
        self.bn.forward(&h, pass)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.bn.backward(g);
        self.conv.backward(&g)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv.params(out);
        self.bn.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }
}

/// `relu(main(x) + shortcut(x))`, shared by both block types.
struct Residual {
    main: Sequential,
    downsample: Option<Downsample>,
    out_relu: Relu,
}

impl Layer for Residual {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut h = self.main.forward(x, pass);
        match &mut self.downsample {
            Some(ds) => h.add_assign(&ds.forward(x, pass)),
            None => h.add_assign(x),
        }
        self.out_relu.forward(&h, pass)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.out_relu.backward(grad);
        let mut dx = self.main.backward(&g);
        match &mut self.downsample {
            Some(ds) => dx.add_assign(&ds.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.main.params(out);
        if let Some(ds) = &self.downsample {
            ds.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.main.params_mut(out);
        if let Some(ds) = &mut self.downsample {
            ds.params_mut(out);
        }
    }
}

/// Channel gating: `x * sigmoid(fc2(relu(fc1(mean_hw(x)))))`.
pub struct SqueezeExcite {
    fc1: Conv2d,
    relu: Relu,
    fc2: Conv2d,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl SqueezeExcite {
    pub fn new(prefix: &str, channels: usize, reduced: usize, rng: &mut Stream) -> Self {
        Self {
            fc1: Conv2d::new(
                &format!("{prefix}.fc1"),
                ConvShape::new(channels, reduced, 1, 1, 0),
                true,
                rng,
            ),
            relu: Relu::new(),
            fc2: Conv2d::new(
                &format!("{prefix}.fc2"),
                ConvShape::new(reduced, channels, 1, 1, 0),
                true,
                rng,
            ),
            cache: None,
        }
    }
}

impl Layer for SqueezeExcite {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let hw = h * w;
        let pooled: Vec<f32> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let pooled = Tensor::from_vec(&[n, c, 1, 1], pooled).expect("se pool");
        let z = self.fc1.forward(&pooled, pass);
        let z = self.relu.forward(&z, pass);
        let z = self.fc2.forward(&z, pass);
        let gate: Vec<f32> = z.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut out = x.clone();
        for (plane, &g) in out.data_mut().chunks_mut(hw).zip(&gate) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        if pass.record {
            self.cache = Some((x.clone(), gate));
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, gate) = self
            .cache
            .take()
            .expect("SqueezeExcite::backward without recorded forward");
        let (n, c, h, w) = x.nchw();
        let hw = h * w;
        let mut dx = grad.clone();
        let mut dz = vec![0.0f32; n * c];
        for (i, ((dplane, xplane), &g)) in dx
            .data_mut()
            .chunks_mut(hw)
            .zip(x.data().chunks(hw))
            .zip(&gate)
            .enumerate()
        {
            let dgate: f32 = dplane.iter().zip(xplane).map(|(d, x)| d * x).sum();
            dz[i] = dgate * g * (1.0 - g);
            dplane.iter_mut().for_each(|d| *d *= g);
        }
        let dz = Tensor::from_vec(&[n, c, 1, 1], dz).expect("se grad");
        let d = self.fc2.backward(&dz);
        let d = self.relu.backward(&d);
        let dpooled = self.fc1.backward(&d);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dpooled.data()) {
            let g = g / hw as f32;
            plane.iter_mut().for_each(|v| *v += g);
        }
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.fc1.params(out);
        self.fc2.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc1.params_mut(out);
        self.fc2.params_mut(out);
    }
}

fn basic_block(prefix: &str, in_c: usize, planes: usize, stride: usize, rng: &mut Stream) -> Residual {
    let mut main = Sequential::new();
    main.push(Conv2d::new(
        &format!("{prefix}.conv1"),
        ConvShape::new(in_c, planes, 3, stride, 1),
        false,
        rng,
    ))
    .push(BatchNorm2d::new(&format!("{prefix}.bn1"), planes))
    .push(Relu::new())
    .push(Conv2d::new(
        &format!("{prefix}.conv2"),
        ConvShape::new(planes, planes, 3, 1, 1),
        false,
        rng,
    ))
    .push(BatchNorm2d::new(&format!("{prefix}.bn2"), planes));
    let downsample =
        (stride != 1 || in_c != planes).then(|| Downsample::new(prefix, in_c, planes, stride, rng));
    Residual {
        main,
        downsample,
        out_relu: Relu::new(),
    }
}

#[allow(clippy::too_many_arguments)]
fn se_bottleneck(
    prefix: &str,
    in_c: usize,
    planes: usize,
    stride: usize,
    groups: usize,
    base_width: usize,
    se_reduction: usize,
    rng: &mut Stream,
) -> Residual {
    let width = planes * base_width / 64 * groups;
    let out_c = planes * 4;
    let mut main = Sequential::new();
    main.push(Conv2d::new(
        &format!("{prefix}.conv1"),
        ConvShape::new(in_c, width, 1, 1, 0),
        false,
        rng,
    ))
    .push(BatchNorm2d::new(&format!("{prefix}.bn1"), width))
    .push(Relu::new())
    .push(Conv2d::new(
        &format!("{prefix}.conv2"),
        ConvShape::new(width, width, 3, stride, 1).grouped(groups),
        false,
        rng,
    ))
    .push(BatchNorm2d::new(&format!("{prefix}.bn2"), width))
    .push(Relu::new())
    .push(Conv2d::new(
        &format!("{prefix}.conv3"),
        ConvShape::new(width, out_c, 1, 1, 0),
        false,
        rng,
    ))
    .push(BatchNorm2d::new(&format!("{prefix}.bn3"), out_c))
    .push(SqueezeExcite::new(
        &format!("{prefix}.se"),
        out_c,
        out_c / se_reduction,
        rng,
    ));
    let downsample =
        (stride != 1 || in_c != out_c).then(|| Downsample::new(prefix, in_c, out_c, stride, rng));
    Residual {
        main,
        downsample,
        out_relu: Relu::new(),
    }
}

/// Feature extractor `[n, 3, h, w] -> [n, feature_width]` (global average pooled).
pub fn build(cfg: &ResNetConfig, rng: &mut Stream) -> Sequential {
    let mut body = Sequential::new();
    body.push(
        Conv2d::new("conv1", ConvShape::new(3, cfg.stem, 7, 2, 3), false, rng).without_input_grad(),
    )
    .push(BatchNorm2d::new("bn1", cfg.stem))
    .push(Relu::new())
    .push(MaxPool2d::new(3, 2, 1));
    let mut in_c = cfg.stem;
    for (stage, (&planes, &depth)) in cfg.planes.iter().zip(&cfg.depths).enumerate() {
        for j in 0..depth {
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{j}", stage + 1);
            match cfg.block {
                BlockKind::Basic => {
                    body.push(basic_block(&prefix, in_c, planes, stride, rng));
                    in_c = planes;
                }
                BlockKind::SeBottleneck {
                    groups,
                    base_width,
                    se_reduction,
                } => {
                    body.push(se_bottleneck(
                        &prefix,
                        in_c,
                        planes,
                        stride,
                        groups,
                        base_width,
                        se_reduction,
                        rng,
                    ));
                    in_c = planes * 4;
                }
            }
        }
    }
    body.push(GlobalAvgPool::new());
    body
}
