//! Class-balanced cross-entropy, Adam, and the per-fold training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRef, LabelCounts, LesionLabel};
use crate::error::{Error, Result};
use crate::imaging::{read_gray_png, Image};
use crate::modelkit::tensor::{Param, Tensor};
use crate::modelkit::{ClassifierModel, DigestScope, NUM_CLASSES};
use crate::pipeline::{augment, preprocess, stack, AugmentSpec, PreprocessSpec};
use crate::rng::substream;
use crate::splits::Fold;

/// Normalized inverse class frequency, indexed by [`LesionLabel::index`].
pub fn class_weights(counts: LabelCounts) -> Result<[f64; 2]> {
    let n = [counts.benign, counts.invasive];
    if n.contains(&0) {
        return Err(Error::InvalidParams(format!(
            "class weights need both counts positive, got benign {} and invasive {}",
            n[0], n[1]
        )));
    }
    let inv = n.map(|c| 1.0 / c as f64);
    let total: f64 = inv.iter().sum();
    Ok(inv.map(|v| v / total))
}

fn check_weights(w: [f64; 2]) -> Result<()> {
    if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) || ((w[0] + w[1]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!(
            "class weights {w:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

fn log_softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Weighted average of per-sample cross-entropy:
/// `sum_i w[y_i] * CE_i / sum_i w[y_i]`.
pub fn weighted_ce_loss(logits: &[[f64; 2]], labels: &[usize], weights: [f64; 2]) -> Result<f64> {
    weighted_ce_with_grad(logits, labels, weights).map(|(l, _)| l)
}

/// Loss and its gradient with respect to each logit row.
pub fn weighted_ce_with_grad(
    logits: &[[f64; 2]],
    labels: &[usize],
    weights: [f64; 2],
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_weights(weights)?;
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidParams(format!("label {bad} outside {{0, 1}}")));
    }
    let norm: f64 = labels.iter().map(|&y| weights[y]).sum();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let lp = log_softmax(z);
        let w = weights[y] / norm;
        loss -= w * lp[y];
        let mut g = [w * lp[0].exp(), w * lp[1].exp()];
        g[y] -= w;
        grad.push(g);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; touches only trainable parameters.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update. `params` must list the same tensors in the same order on
    /// every call.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let n = if p.trainable { p.numel() } else { 0 };
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect();
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            if !p.trainable {
                continue;
            }
            for i in 0..m.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = f64::from(m[i]) / c1;
                let vh = f64::from(v[i]) / c2;
                p.value[i] -= (self.lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// `[benign, invasive]`.
    pub class_weights: [f64; 2],
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParams("batch_size and epochs must be positive".into()));
        }
        check_weights(self.class_weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub backbone_digest: String,
    pub head_digest: String,
}

/// Source of decoded images.
pub trait ImageStore {
    fn load(&mut self, path: &Path) -> Result<Image>;
}

/// Reads PNGs from disk, keeping decoded images in memory.
#[derive(Default)]
pub struct DiskStore {
    decoded: HashMap<PathBuf, Image>,
}

impl DiskStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ImageStore for DiskStore {
    fn load(&mut self, path: &Path) -> Result<Image> {
        if let Some(img) = self.decoded.get(path) {
            return Ok(img.clone());
        }
        let img = read_gray_png(path)?;
        self.decoded.insert(path.to_path_buf(), img.clone());
        Ok(img)
    }
}

/// Records every requested path before delegating.
pub struct AuditingStore<S> {
    inner: S,
    reads: Vec<PathBuf>,
}

impl<S: ImageStore> AuditingStore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            reads: Vec::new(),
        }
    }

    pub fn reads(&self) -> &[PathBuf] {
        &self.reads
    }
}

impl<S: ImageStore> ImageStore for AuditingStore<S> {
    fn load(&mut self, path: &Path) -> Result<Image> {
        self.reads.push(path.to_path_buf());
        self.inner.load(path)
    }
}

/// Backbone features of (possibly augmented) images for a frozen backbone,
/// keyed by epoch (`None` when unaugmented) and manifest image index. Since
/// augmentation draws depend only on (seed, epoch, image index), entries are
/// valid across folds as long as the backbone is unchanged.
#[derive(Default)]
pub struct FeatureCache {
    backbone_state: String,
    entries: HashMap<(Option<usize>, usize), Vec<f32>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn bind(&mut self, model: &ClassifierModel, key_salt: &str) {
        let state = format!("{key_salt}/{}", model.state_digest(DigestScope::Backbone));
        if state != self.backbone_state {
            self.entries.clear();
            self.backbone_state = state;
        }
    }
}

/// Where samples come from: an image store plus an optional feature cache
/// (used only for frozen backbones).
pub struct Loader<S> {
    pub store: S,
    pub features: Option<FeatureCache>,
}

/// How a sample is drawn: preprocessing plus optional augmentation at `epoch`.
#[derive(Debug, Clone, Copy)]
pub struct SampleSpec<'a> {
    pub preprocess: &'a PreprocessSpec,
    pub augment: Option<(&'a AugmentSpec, u64, usize)>,
}

impl<S: ImageStore> Loader<S> {
    pub fn new(store: S, cache_features: bool) -> Self {
        Self {
            store,
            features: cache_features.then(FeatureCache::new),
        }
    }

    /// `[3, H, W]` network input for one image.
    pub fn sample(&mut self, manifest: &DatasetManifest, image: &ImageRef, index: usize, spec: SampleSpec) -> Result<Tensor> {
        let raw = self.store.load(&manifest.resolve(image))?;
        let img = match spec.augment {
            Some((aug, seed, epoch)) if aug.enabled => {
                let mut rng = substream(seed, "augment", &[epoch as u64, index as u64]);
                augment(&raw, aug, &mut rng)
            }
            _ => raw,
        };
        preprocess(&img, spec.preprocess)
    }

    /// Ties the feature cache to `model`'s backbone and the sampling specs,
    /// clearing it if either changed. Call before [`Loader::features`].
    pub fn bind_cache(&mut self, model: &ClassifierModel, preprocess: &PreprocessSpec, augment: &AugmentSpec, seed: u64) {
        if let Some(cache) = &mut self.features {
            cache.bind(model, &format!("{preprocess:?}/{augment:?}/{seed}"));
        }
    }

    /// `[B, F]` features; served from the cache when the backbone is frozen.
    pub fn features(
        &mut self,
        model: &mut ClassifierModel,
        manifest: &DatasetManifest,
        items: &[(usize, &ImageRef)],
        spec: SampleSpec,
    ) -> Result<Tensor> {
        let width = model.feature_width();
        let epoch_key = spec.augment.filter(|(a, _, _)| a.enabled).map(|(_, _, e)| e);
        let use_cache = model.regime().backbone_frozen() && self.features.is_some();
        let mut out = Vec::with_capacity(items.len() * width);
        for &(index, image) in items {
            let key = (epoch_key, index);
            if use_cache {
                if let Some(f) = self.features.as_ref().and_then(|c| c.entries.get(&key)) {
                    out.extend_from_slice(f);
                    continue;
                }
            }
            let x = self.sample(manifest, image, index, spec)?;
            let x = stack(std::slice::from_ref(&x))?;
            let f = model.features(&x)?.into_data();
            out.extend_from_slice(&f);
            if use_cache {
                self.features.as_mut().expect("checked").entries.insert(key, f);
            }
        }
        Tensor::from_vec(&[items.len(), width], out)
    }
}

struct TrainItem<'a> {
    index: usize,
    lesion_id: &'a str,
    label: LesionLabel,
    image: &'a ImageRef,
}

/// Trains `model` on every image of the fold's training lesions. Validation
/// lesions are never read.
pub fn train_fold<S: ImageStore>(
    model: &mut ClassifierModel,
    manifest: &DatasetManifest,
    fold: &Fold,
    cfg: &TrainConfig,
    preprocess_spec: &PreprocessSpec,
    augment_spec: &AugmentSpec,
    loader: &mut Loader<S>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    preprocess_spec.validate()?;
    augment_spec.validate()?;
    let indices = manifest.image_indices();
    let mut items = Vec::new();
    for id in &fold.train {
        let lesion = manifest
            .lesion(id)
            .ok_or_else(|| Error::Training(format!("training lesion {id} is not in the manifest")))?;
        for image in &lesion.images {
            items.push(TrainItem {
                index: indices[image.image_id.as_str()],
                lesion_id: &lesion.lesion_id,
                label: lesion.label,
                image,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Training(format!("fold {} has an empty training set", fold.fold_index)));
    }

    let frozen = model.regime().backbone_frozen();
    loader.bind_cache(model, preprocess_spec, augment_spec, cfg.seed);
    let fold_key = fold.fold_index as u64;
    let mut adam = Adam::new(cfg.optimizer, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", &[fold_key, epoch as u64]));
        let mut dropout_rng = substream(cfg.seed, "dropout", &[fold_key, epoch as u64]);
        let spec = SampleSpec {
            preprocess: preprocess_spec,
            augment: Some((augment_spec, cfg.seed, epoch)),
        };
        let mut total = 0.0;
        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let logits = if frozen {
                let refs: Vec<(usize, &ImageRef)> = batch.iter().map(|it| (it.index, it.image)).collect();
                let feats = loader.features(model, manifest, &refs, spec)?;
                model.head_forward(&feats, true, &mut dropout_rng)?
            } else {
                let xs = batch
                    .iter()
                    .map(|it| loader.sample(manifest, it.image, it.index, spec))
                    .collect::<Result<Vec<_>>>()?;
                model.forward(&stack(&xs)?, true, &mut dropout_rng)?
            };
            let rows: Vec<[f64; 2]> = logits
                .data()
                .chunks(2)
                .map(|r| [f64::from(r[0]), f64::from(r[1])])
                .collect();
            let labels: Vec<usize> = batch.iter().map(|it| it.label.index()).collect();
            let (loss, grad) = weighted_ce_with_grad(&rows, &labels, cfg.class_weights)?;
            if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
                let mut lesion_ids: Vec<String> = batch.iter().map(|it| it.lesion_id.to_string()).collect();
                lesion_ids.dedup();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_in_epoch,
                    lesion_ids,
                });
            }
            let g = Tensor::from_vec(
                &[batch.len(), NUM_CLASSES],
                grad.iter().flatten().map(|&v| v as f32).collect(),
            )?;
            model.zero_grad();
            model.backward(&g, !frozen);
            adam.step(model.params_mut());
            total += loss * batch.len() as f64;
            steps += 1;
        }
        epoch_losses.push(total / items.len() as f64);
    }
    Ok(TrainHistory {
        epoch_losses,
        steps,
        backbone_digest: model.digest(DigestScope::Backbone),
        head_digest: model.digest(DigestScope::Head),
    })
}

impl TrainHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Training(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        let w = class_weights(LabelCounts::new(91, 9)).unwrap();
        assert!((w[0] - 0.09).abs() < 1e-12 && (w[1] - 0.91).abs() < 1e-12);
        assert_eq!(class_weights(LabelCounts::new(10, 10)).unwrap(), [0.5, 0.5]);
        let w = class_weights(LabelCounts::new(3, 1)).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!(class_weights(LabelCounts::new(0, 4)).is_err());
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        let l = weighted_ce_loss(&[[0.0, 0.0]; 3], &[0, 1, 1], [0.5, 0.5]).unwrap();
        assert!((l - ln2).abs() < 1e-12);
        // softmax (0.2, 0.8)
        let z = [0.0, (0.8f64 / 0.2).ln()];
        let l = weighted_ce_loss(&[z], &[1], [0.09, 0.91]).unwrap();
        assert!((l + 0.8f64.ln()).abs() < 1e-12);
        let l = weighted_ce_loss(&[[0.0, 0.0]; 2], &[0, 1], [0.09, 0.91]).unwrap();
        assert!((l - ln2).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_input() {
        assert!(weighted_ce_loss(&[[0.0, 0.0]], &[2], [0.5, 0.5]).is_err());
        assert!(weighted_ce_loss(&[[0.0, 0.0]], &[0, 1], [0.5, 0.5]).is_err());
        assert!(weighted_ce_loss(&[[0.0, 0.0]], &[0], [0.5, 0.6]).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = weighted_ce_loss(&[[1e4, -1e4]], &[1], [0.5, 0.5]).unwrap();
        assert!((l - 2e4).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::weight("w".into(), &[2], vec![1.0, -1.0]);
        p.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(AdamConfig::default(), 0.1);
        opt.step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_frozen_and_zero_lr() {
        let mut a = Param::weight("a".into(), &[1], vec![1.0]);
        let mut b = Param::weight("b".into(), &[1], vec![1.0]);
        a.grad = vec![1.0];
        b.grad = vec![1.0];
        b.trainable = false;
        let mut opt = Adam::new(AdamConfig::default(), 0.0);
        opt.step(vec![&mut a, &mut b]);
        assert_eq!((a.value[0], b.value[0]), (1.0, 1.0));
        let mut opt = Adam::new(AdamConfig::default(), 0.5);
        opt.step(vec![&mut a, &mut b]);
        assert!(a.value[0] < 1.0);
        assert_eq!(b.value[0], 1.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig {
            learning_rate: 1e-5,
            batch_size: 5,
            epochs: 30,
            optimizer: AdamConfig::default(),
            class_weights: [0.09, 0.91],
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..ok }.validate().is_err());
        assert!(TrainConfig { class_weights: [0.5, 0.4], ..ok }.validate().is_err());
    }
}
