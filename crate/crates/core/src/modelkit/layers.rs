//! Layers with explicit forward/backward passes over NCHW tensors.
//!
//! Each layer caches what its backward pass needs only when the forward pass
//! was run with `Pass::record`. Parameter gradients accumulate into
//! `Param::grad` until the optimizer clears them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{gemm, Param, Tensor};
use crate::rng::Stream;

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics in normalization layers, active dropout.
    pub train: bool,
    /// Keep activations for a later `backward`.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        train: true,
        record: true,
    };
    pub const EVAL: Pass = Pass {
        train: false,
        record: false,
    };
}

pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor;

    /// Consumes the cached activations of the last recorded forward pass and
    /// returns the gradient with respect to that pass's input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>);

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
}

pub(crate) fn kaiming_normal(n: usize, fan: usize, rng: &mut Stream) -> Vec<f32> {
    let std = (2.0 / fan as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect()
}

pub(crate) fn uniform(n: usize, bound: f32, rng: &mut Stream) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    shape: ConvShape,
    /// The stem never needs an input gradient.
    input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(name: &str, shape: ConvShape, bias: bool, rng: &mut Stream) -> Self {
        assert!(shape.in_c % shape.groups == 0 && shape.out_c % shape.groups == 0);
        let cin_g = shape.in_c / shape.groups;
        let k2 = shape.kernel * shape.kernel;
        let n = shape.out_c * cin_g * k2;
        // fan-out mode, as torchvision initializes residual networks
        let weight = Param::weight(
            format!("{name}.weight"),
            &[shape.out_c, cin_g, shape.kernel, shape.kernel],
            kaiming_normal(n, shape.out_c / shape.groups * k2, rng),
        );
        let bias = bias.then(|| {
            let bound = 1.0 / ((cin_g * k2) as f32).sqrt();
            Param::weight(
                format!("{name}.bias"),
                &[shape.out_c],
                uniform(shape.out_c, bound, rng),
            )
        });
        Self {
            weight,
            bias,
            shape,
            input_grad: true,
            cache: None,
        }
    }

    pub fn without_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let s = &self.shape;
        (
            (h + 2 * s.pad - s.kernel) / s.stride + 1,
            (w + 2 * s.pad - s.kernel) / s.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.shape.kernel == 1 && self.shape.stride == 1 && self.shape.pad == 0
    }
}

/// Valid output range `[lo, hi)` for kernel offset `k` along an axis of length `len`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o*stride + k - pad must lie in [0, len)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        (len + pad - k).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let hw_o = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(w, wo, kx, stride, pad);
                let row = &mut cols[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let iy = oy * stride + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    dst[..ox_lo].fill(0.0);
                    dst[ox_hi..].fill(0.0);
                    if stride == 1 {
                        let ix0 = ox_lo + kx - pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let hw_o = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(w, wo, kx, stride, pad);
                let row = &cols[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let s = self.shape;
        assert_eq!(c, s.in_c, "{}: input channels", self.weight.name);
        let (ho, wo) = self.out_hw(h, w);
        let (cin_g, cout_g) = (s.in_c / s.groups, s.out_c / s.groups);
        let kk = cin_g * s.kernel * s.kernel;
        let hw_o = ho * wo;
        let pointwise = self.pointwise();
        let mut out = Tensor::zeros(&[n, s.out_c, ho, wo]);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * hw_o]
        };
        let xd = x.data();
        for b in 0..n {
            for g in 0..s.groups {
                let xin = &xd[(b * c + g * cin_g) * h * w..][..cin_g * h * w];
                let colref: &[f32] = if pointwise {
                    xin
                } else {
                    im2col(xin, cin_g, h, w, s.kernel, s.stride, s.pad, ho, wo, &mut cols);
                    &cols
                };
                let wg = &self.weight.value[g * cout_g * kk..][..cout_g * kk];
                let og = &mut out.data_mut()[(b * s.out_c + g * cout_g) * hw_o..][..cout_g * hw_o];
                gemm(cout_g, kk, hw_o, wg, false, colref, false, 0.0, og);
            }
        }
        if let Some(bias) = &self.bias {
            for (i, plane) in out.data_mut().chunks_mut(hw_o).enumerate() {
                let bv = bias.value[i % s.out_c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        if pass.record {
            self.cache = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self
            .cache
            .take()
            .expect("Conv2d::backward without recorded forward");
        let (n, c, h, w) = x.nchw();
        let s = self.shape;
        let (_, _, ho, wo) = grad.nchw();
        let (cin_g, cout_g) = (s.in_c / s.groups, s.out_c / s.groups);
        let kk = cin_g * s.kernel * s.kernel;
        let hw_o = ho * wo;
        let pointwise = self.pointwise();
        let train_w = self.weight.trainable;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * hw_o]
        };
        let mut dcols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * hw_o]
        };
        let gd = grad.data();
        for b in 0..n {
            for g in 0..s.groups {
                let xin = &x.data()[(b * c + g * cin_g) * h * w..][..cin_g * h * w];
                let dout = &gd[(b * s.out_c + g * cout_g) * hw_o..][..cout_g * hw_o];
                if train_w {
                    let colref: &[f32] = if pointwise {
                        xin
                    } else {
                        im2col(xin, cin_g, h, w, s.kernel, s.stride, s.pad, ho, wo, &mut cols);
                        &cols
                    };
                    let dw = &mut self.weight.grad[g * cout_g * kk..][..cout_g * kk];
                    gemm(cout_g, hw_o, kk, dout, false, colref, true, 1.0, dw);
                }
                if self.input_grad {
                    let wg = &self.weight.value[g * cout_g * kk..][..cout_g * kk];
                    let dxg = &mut dx.data_mut()[(b * c + g * cin_g) * h * w..][..cin_g * h * w];
                    if pointwise {
                        gemm(kk, cout_g, hw_o, wg, true, dout, false, 0.0, dxg);
                    } else {
                        gemm(kk, cout_g, hw_o, wg, true, dout, false, 0.0, &mut dcols);
                        col2im_add(&dcols, cin_g, h, w, s.kernel, s.stride, s.pad, ho, wo, dxg);
                    }
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            if bias.trainable {
                for (i, plane) in gd.chunks(hw_o).enumerate() {
                    bias.grad[i % s.out_c] += plane.iter().sum::<f32>();
                }
            }
        }
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    eps: f32,
    momentum: f32,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
    shape: (usize, usize, usize, usize),
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            weight: Param::weight(format!("{name}.weight"), &[channels], vec![1.0; channels]),
            bias: Param::weight(format!("{name}.bias"), &[channels], vec![0.0; channels]),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![0.0; channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![1.0; channels],
            ),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = x.data();
        let (mean, var): (Vec<f32>, Vec<f32>) = if pass.train {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let plane = &xd[(b * c + ch) * hw..][..hw];
                    let (s, s2) = plane.iter().fold((0.0f64, 0.0f64), |(s, s2), &v| {
                        let v = f64::from(v);
                        (s + v, s2 + v * v)
                    });
                    mean[ch] += s;
                    sq[ch] += s2;
                }
            }
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                mean[ch] /= m;
                var[ch] = (sq[ch] / m - mean[ch] * mean[ch]).max(0.0);
            }
            let mom = f64::from(self.momentum);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut self.running_mean.value[ch];
                *rm = ((1.0 - mom) * f64::from(*rm) + mom * mean[ch]) as f32;
                let rv = &mut self.running_var.value[ch];
                *rv = ((1.0 - mom) * f64::from(*rv) + mom * var[ch] * unbias) as f32;
            }
            (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            )
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut xhat = if pass.record {
            vec![0.0; xd.len()]
        } else {
            Vec::new()
        };
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, bt) = (self.weight.value[ch], self.bias.value[ch]);
                let src = &xd[off..off + hw];
                let dst = &mut out.data_mut()[off..off + hw];
                if pass.record {
                    let xh = &mut xhat[off..off + hw];
                    for i in 0..hw {
                        let v = (src[i] - mu) * is;
                        xh[i] = v;
                        dst[i] = g * v + bt;
                    }
                } else {
                    for i in 0..hw {
                        dst[i] = g * (src[i] - mu) * is + bt;
                    }
                }
            }
        }
        if pass.record {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                batch_stats: pass.train,
                shape: (n, c, h, w),
            });
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without recorded forward");
        let (n, c, h, w) = cache.shape;
        let hw = h * w;
        let m = (n * hw) as f32;
        let gd = grad.data();
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mut s, mut s2) = (0.0f32, 0.0f32);
                for i in off..off + hw {
                    s += gd[i];
                    s2 += gd[i] * cache.xhat[i];
                }
                sum_dy[ch] += s;
                sum_dy_xhat[ch] += s2;
            }
        }
        if self.weight.trainable {
            for ch in 0..c {
                self.weight.grad[ch] += sum_dy_xhat[ch];
                self.bias.grad[ch] += sum_dy[ch];
            }
        }
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = self.weight.value[ch] * cache.inv_std[ch];
                let dst = &mut dx.data_mut()[off..off + hw];
                if cache.batch_stats {
                    let (mdy, mdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    for i in 0..hw {
                        dst[i] = scale * (gd[off + i] - mdy - cache.xhat[off + i] * mdx);
                    }
                } else {
                    for i in 0..hw {
                        dst[i] = scale * gd[off + i];
                    }
                }
            }
        }
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([
            &self.weight,
            &self.bias,
            &self.running_mean,
            &self.running_var,
        ]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([
            &mut self.weight,
            &mut self.bias,
            &mut self.running_mean,
            &mut self.running_var,
        ]);
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        if pass.record {
            self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("Relu::backward without recorded forward");
        let mut dx = grad.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = if pass.record {
            vec![0usize; n * c * ho * wo]
        } else {
            Vec::new()
        };
        let xd = x.data();
        for plane_i in 0..n * c {
            let plane = &xd[plane_i * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane_i * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    if pass.record {
                        arg[o] = best_i;
                    }
                }
            }
        }
        if pass.record {
            self.cache = Some((arg, [n, c, h, w]));
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self
            .cache
            .take()
            .expect("MaxPool2d::backward without recorded forward");
        let (_, _, ho, wo) = grad.nchw();
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let gd = grad.data();
        for plane_i in 0..n * c {
            for o in 0..ho * wo {
                let oi = plane_i * ho * wo + o;
                dx.data_mut()[plane_i * h * w + arg[oi]] += gd[oi];
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

/// Non-overlapping average pooling (kernel = stride).
pub struct AvgPool2d {
    kernel: usize,
    shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            shape: None,
        }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let k = self.kernel;
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let norm = 1.0 / (k * k) as f32;
        let xd = x.data();
        for plane_i in 0..n * c {
            let plane = &xd[plane_i * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += plane[(oy * k + ky) * w + ox * k + kx];
                        }
                    }
                    out.data_mut()[(plane_i * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
        if pass.record {
            self.shape = Some([n, c, h, w]);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self
            .shape
            .take()
            .expect("AvgPool2d::backward without recorded forward");
        let k = self.kernel;
        let (_, _, ho, wo) = grad.nchw();
        let norm = 1.0 / (k * k) as f32;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let gd = grad.data();
        for plane_i in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[(plane_i * ho + oy) * wo + ox] * norm;
                    for ky in 0..k {
                        for kx in 0..k {
                            dx.data_mut()[plane_i * h * w + (oy * k + ky) * w + ox * k + kx] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

/// `[n, c, h, w] -> [n, c]` spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.nchw();
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        if pass.record {
            self.shape = Some([n, c, h, w]);
        }
        Tensor::from_vec(&[n, c], data).expect("pool shape")
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self
            .shape
            .take()
            .expect("GlobalAvgPool::backward without recorded forward");
        let hw = h * w;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
            plane.fill(g / hw as f32);
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

// ---------------------------------------------------------------------------
// Affine

/// `[n, in] -> [n, out]`, weight stored `[out, in]`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)` for weight and bias.
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Stream) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Self {
            weight: Param::weight(
                format!("{name}.weight"),
                &[outputs, inputs],
                uniform(outputs * inputs, bound, rng),
            ),
            bias: Param::weight(format!("{name}.bias"), &[outputs], uniform(outputs, bound, rng)),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        assert_eq!(fin, self.inputs(), "{}: input width", self.weight.name);
        let fout = self.outputs();
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, x.data(), false, &self.weight.value, true, 0.0, out.data_mut());
        for row in out.data_mut().chunks_mut(fout) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        if pass.record {
            self.cache = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("Linear::backward without recorded forward");
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = self.outputs();
        if self.weight.trainable {
            gemm(fout, n, fin, grad.data(), true, x.data(), false, 1.0, &mut self.weight.grad);
            for row in grad.data().chunks(fout) {
                for (g, v) in self.bias.grad.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, fin]);
        gemm(n, fout, fin, grad.data(), false, &self.weight.value, false, 0.0, dx.data_mut());
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([&mut self.weight, &mut self.bias]);
    }
}

// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return x.clone();
        };
        let mut h = first.forward(x, pass);
        for layer in iter {
            h = layer.forward(&h, pass);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for l in &self.layers {
            l.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}
