//! Preprocessing (resize, channel replication, standardization) and the
//! online training augmentation (horizontal flip, photometric jitter).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::modelkit::tensor::Tensor;
use crate::rng::Stream;

/// Per-channel statistics the published ImageNet backbones were trained with.
pub const PRETRAINED_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PRETRAINED_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    PretrainedStats,
    /// Statistics of the training images, on the 0..1 scale.
    DatasetStats { mean: f32, std: f32 },
}

impl Normalization {
    fn channel_stats(&self, c: usize) -> (f32, f32) {
        match *self {
            Normalization::PretrainedStats => (PRETRAINED_MEAN[c], PRETRAINED_STD[c]),
            Normalization::DatasetStats { mean, std } => (mean, std),
        }
    }
}

/// The only supported resampling: bilinear with half-pixel centers and edge clamping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    BilinearHalfPixel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    ReplicateGray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_height_px: usize,
    pub target_width_px: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    pub normalization: Normalization,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_height_px: DEFAULT_INPUT_SIZE,
            target_width_px: DEFAULT_INPUT_SIZE,
            interpolation: Interpolation::BilinearHalfPixel,
            channel_mode: ChannelMode::ReplicateGray,
            normalization: Normalization::PretrainedStats,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_height_px == 0 || self.target_width_px == 0 {
            return Err(Error::InvalidParams("target size must be positive".into()));
        }
        if let Normalization::DatasetStats { std, mean } = self.normalization {
            if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "dataset statistics need finite mean and positive std, got {mean}/{std}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub brightness_delta: f32,
    pub contrast_delta: f32,
    /// Inert on replicated grayscale input; kept for completeness.
    pub saturation_delta: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            brightness_delta: 0.2,
            contrast_delta: 0.2,
            saturation_delta: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidParams(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        for (name, d) in [
            ("brightness_delta", self.brightness_delta),
            ("contrast_delta", self.contrast_delta),
            ("saturation_delta", self.saturation_delta),
        ] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidParams(format!("{name} {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Half-pixel-center bilinear resampling with edge clamping, per channel.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidParams(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut data = Vec::with_capacity(image.channels() * out_h * out_w);
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    Image::new(image.channels(), out_h, out_w, data)
}

/// Reverses column order in every channel.
pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Multiplicative factors for one photometric jitter draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    /// Each factor uniform in `[1 - delta, 1 + delta]`; exactly 1 when delta is 0.
    pub fn sample(spec: &AugmentSpec, rng: &mut Stream) -> Self {
        let mut draw = |d: f32| {
            if d == 0.0 {
                1.0
            } else {
                rng.random_range(1.0 - d..=1.0 + d)
            }
        };
        Self {
            brightness: draw(spec.brightness_delta),
            contrast: draw(spec.contrast_delta),
            saturation: draw(spec.saturation_delta),
        }
    }
}

fn clamp_pixels(data: &mut [f32]) {
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
}

/// Brightness, then contrast around the image mean, then saturation around
/// the per-pixel channel mean; clamped to [0, 255] after each step. A factor
/// of exactly 1 leaves the image untouched. Saturation is the identity on a
/// single-channel image (its replication has equal channels).
pub fn apply_jitter(image: &Image, f: JitterFactors) -> Image {
    let mut out = image.clone();
    if f.brightness != 1.0 {
        out.data_mut().iter_mut().for_each(|v| *v *= f.brightness);
        clamp_pixels(out.data_mut());
    }
    if f.contrast != 1.0 {
        let mean = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.data().len() as f64;
        let mean = mean as f32;
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = mean + f.contrast * (*v - mean));
        clamp_pixels(out.data_mut());
    }
    if f.saturation != 1.0 && out.channels() > 1 {
        let (c, n) = (out.channels(), out.height() * out.width());
        let data = out.data_mut();
        for i in 0..n {
            let mean = (0..c).map(|ch| data[ch * n + i]).sum::<f32>() / c as f32;
            for ch in 0..c {
                let v = &mut data[ch * n + i];
                *v = mean + f.saturation * (*v - mean);
            }
        }
        clamp_pixels(out.data_mut());
    }
    out
}

pub fn photometric_jitter(image: &Image, spec: &AugmentSpec, rng: &mut Stream) -> Image {
    if !spec.enabled {
        return image.clone();
    }
    apply_jitter(image, JitterFactors::sample(spec, rng))
}

/// Training-time augmentation: random horizontal flip, then jitter.
pub fn augment(image: &Image, spec: &AugmentSpec, rng: &mut Stream) -> Image {
    if !spec.enabled {
        return image.clone();
    }
    let flip = rng.random_bool(spec.hflip_prob);
    let factors = JitterFactors::sample(spec, rng);
    let img = if flip { hflip(image) } else { image.clone() };
    apply_jitter(&img, factors)
}

/// Resize, replicate to three channels, standardize. Returns `[3, H, W]`.
pub fn preprocess(image: &Image, spec: &PreprocessSpec) -> Result<Tensor> {
    spec.validate()?;
    let resized = resize_bilinear(image, spec.target_height_px, spec.target_width_px)?;
    let rgb = match resized.channels() {
        1 => resized.replicated(3),
        3 => resized,
        c => {
            return Err(Error::Shape(format!(
                "expected 1 or 3 channels, got {c}"
            )))
        }
    };
    let (h, w) = (rgb.height(), rgb.width());
    let mut data = rgb.into_data();
    for c in 0..3 {
        let (mean, std) = spec.normalization.channel_stats(c);
        let inv = 1.0 / std;
        for v in &mut data[c * h * w..(c + 1) * h * w] {
            *v = (*v / 255.0 - mean) * inv;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Mean and standard deviation of pixel intensities (0..1 scale) over `images`.
pub fn dataset_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Normalization> {
    let (mut n, mut s, mut s2) = (0u64, 0.0f64, 0.0f64);
    for img in images {
        for &v in img.data() {
            let v = f64::from(v) / 255.0;
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParams("no pixels for dataset statistics".into()));
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
    Ok(Normalization::DatasetStats {
        mean: mean as f32,
        std: std as f32,
    })
}

/// Stacks `[3, H, W]` samples into `[B, 3, H, W]`.
pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "batch mixes shapes {shape:?} and {:?}",
                s.shape()
            )));
        }
        data.extend_from_slice(s.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}
