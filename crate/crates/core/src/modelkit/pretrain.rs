//! Surrogate pretraining: a short supervised run on generic synthetic
//! textures (stripes, checkers, blobs, solid and dashed lines), used when
//! published weights cannot be downloaded. Produces a backbone checkpoint
//! that FT and RC load like any other.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::{Layer, Linear, Pass};
use super::tensor::Tensor;
use super::{backbone_checkpoint, Backbone, ModelSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::pipeline::{preprocess, stack, Interpolation, ChannelMode, Normalization, PreprocessSpec};
use crate::rng::{substream, Stream};
use crate::trainer::{Adam, AdamConfig};

/// Number of texture classes.
pub const N_PATTERNS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub image_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParams(
                "pretraining needs image_size >= 32 and positive steps and batch size".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams("pretraining learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Accuracy on freshly drawn textures after the last step.
    pub holdout_accuracy: f64,
}

/// One grayscale texture of class `class` on a 0..255 scale.
pub fn pattern(class: usize, size: usize, rng: &mut Stream) -> Image {
    let period = rng.random_range(6.0..24.0f32);
    let phase = rng.random_range(0.0..2.0 * PI);
    let base = rng.random_range(60.0..140.0f32);
    let amp = rng.random_range(30.0..90.0f32);
    let angle = rng.random_range(0.3..1.27f32) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let blobs: Vec<(f32, f32, f32)> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
                rng.random_range(3.0..12.0f32),
            )
        })
        .collect();
    let (gx, gy) = (rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32));
    // thin lines: (offset along the normal, half width)
    let theta = rng.random_range(0.0..PI);
    let (nx, ny) = (theta.sin(), -theta.cos());
    let lines: Vec<(f32, f32)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(0.15..0.85f32) * size as f32, rng.random_range(0.8..2.5f32)))
        .collect();
    let dash = rng.random_range(8.0..30.0f32);
    let duty = rng.random_range(0.3..0.6f32);
    let center = size as f32 / 2.0;
    let noise = Normal::new(0.0f32, 8.0).expect("valid");
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32, y as f32);
            let w = 2.0 * PI / period;
            let s = match class {
                0 => (w * fy + phase).sin(),
                1 => (w * fx + phase).sin(),
                2 => (w * (fx * angle.cos() + fy * angle.sin()) + phase).sin(),
                3 => (w * fx + phase).sin().signum() * (w * fy).sin().signum(),
                4 => {
                    let v: f32 = blobs
                        .iter()
                        .map(|&(cx, cy, r)| (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    2.0 * v.min(1.0) - 1.0
                }
                5 => (gx * (fx / size as f32 - 0.5) + gy * (fy / size as f32 - 0.5)) * 2.0,
                _ => {
                    let (dx, dy) = (fx - center, fy - center);
                    let across = dx * nx + dy * ny + center;
                    let along = dx * ny - dy * nx + center;
                    let on = lines.iter().any(|&(o, hw)| (across - o).abs() <= hw);
                    let gap = class == 7 && ((along + phase * dash) / dash).fract() < duty;
                    if on && !gap {
                        1.0
                    } else {
                        -0.6
                    }
                }
            };
            let v = base + amp * s + noise.sample(rng);
            px.push(v.clamp(0.0, 255.0));
        }
    }
    Image::new(1, size, size, px).expect("consistent size")
}

fn batch(cfg: &PretrainConfig, tag: &str, step: usize) -> Result<(Tensor, Vec<usize>)> {
    let spec = PreprocessSpec {
        target_height_px: cfg.image_size,
        target_width_px: cfg.image_size,
        interpolation: Interpolation::BilinearHalfPixel,
        channel_mode: ChannelMode::ReplicateGray,
        normalization: Normalization::PretrainedStats,
    };
    let mut rng = substream(cfg.seed, tag, &[step as u64]);
    let mut samples = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let class = rng.random_range(0..N_PATTERNS);
        samples.push(preprocess(&pattern(class, cfg.image_size, &mut rng), &spec)?);
        labels.push(class);
    }
    Ok((stack(&samples)?, labels))
}

/// Mean cross-entropy and its logit gradient.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let k = logits.shape()[1];
    let n = labels.len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|&v| f64::from(v)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..k {
            let p = (row[j] - m).exp() / z;
            let t = if j == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + j] = ((p - t) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Trains a fresh backbone on the texture task and returns it as a checkpoint.
pub fn pretrain(spec: ModelSpec, cfg: &PretrainConfig) -> Result<(Checkpoint, PretrainReport)> {
    cfg.validate()?;
    let mut backbone = Backbone::new(spec, &mut substream(cfg.seed, "pretrain-init", &[]));
    let mut head = Linear::new(
        "pretrain_head",
        backbone.feature_width(),
        N_PATTERNS,
        &mut substream(cfg.seed, "pretrain-head", &[]),
    );
    let adam_cfg = AdamConfig::default();
    let mut opt_body = Adam::new(adam_cfg, cfg.learning_rate);
    let mut opt_head = Adam::new(adam_cfg, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, labels) = batch(cfg, "pretrain-batch", step)?;
        let feats = backbone.forward(&x, Pass::TRAIN);
        let logits = head.forward(&feats, Pass::TRAIN);
        let (loss, grad) = cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(Error::InvalidParams(format!("pretraining diverged at step {step}")));
        }
        losses.push(loss);
        for p in backbone.params_mut() {
            p.zero_grad();
        }
        let mut hp = Vec::new();
        head.params_mut(&mut hp);
        for p in hp {
            p.zero_grad();
        }
        let g = head.backward(&grad);
        backbone.backward(&g);
        opt_body.step(backbone.params_mut());
        let mut hp = Vec::new();
        head.params_mut(&mut hp);
        opt_head.step(hp);
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..4 {
        let (x, labels) = batch(cfg, "pretrain-holdout", i)?;
        let logits = head.forward(&backbone.forward(&x, Pass::EVAL), Pass::EVAL);
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let best = (0..N_PATTERNS)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("non-empty");
            correct += usize::from(best == y);
            total += 1;
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "surrogate-textures".into());
    meta.insert("backbone".into(), spec.backbone.to_string());
    meta.insert("profile".into(), spec.profile.as_str().into());
    meta.insert("steps".into(), cfg.steps.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    let report = PretrainReport {
        losses,
        holdout_accuracy: correct as f64 / total as f64,
    };
    Ok((backbone_checkpoint(&backbone, meta), report))
}
