//! Backbone registry, the two-logit classifier and the three training regimes.
//!
//! Every backbone exists in two profiles. `standard` is the published layout
//! (ResNet-18, DenseNet-121, SE-ResNeXt-50 32x4d) and loads published
//! checkpoints by name. `compact` keeps the same topology with a quarter of
//! the channels, so full cross-validation fits on a single CPU core.

pub mod checkpoint;
pub mod densenet;
pub mod fetch;
pub mod layers;
pub mod pretrain;
pub mod resnet;
#[cfg(test)]
mod gradcheck;
pub mod tensor;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use checkpoint::Checkpoint;
use densenet::DenseNetConfig;
use layers::{Layer, Linear, Pass, Sequential};
use resnet::{BlockKind, ResNetConfig};
use tensor::{Param, ParamKind, Tensor};

pub const NUM_CLASSES: usize = 2;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "resnet18-class")]
    Resnet18,
    #[serde(rename = "densenet121-class")]
    Densenet121,
    #[serde(rename = "se-resnext50-class")]
    SeResnext50,
}

impl BackboneId {
    pub const ALL: [BackboneId; 3] = [
        BackboneId::Resnet18,
        BackboneId::Densenet121,
        BackboneId::SeResnext50,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::Resnet18 => "resnet18-class",
            BackboneId::Densenet121 => "densenet121-class",
            BackboneId::SeResnext50 => "se-resnext50-class",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneId::Resnet18 => "Resnet18",
            BackboneId::Densenet121 => "Densenet121",
            BackboneId::SeResnext50 => "SE-Resnext50",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Standard,
    Compact,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Standard => "standard",
            Profile::Compact => "compact",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Profile::Standard),
            "compact" => Ok(Profile::Compact),
            _ => Err(Error::InvalidParams(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    /// Random initialization, everything trainable.
    #[serde(rename = "SCR")]
    Scratch,
    /// Pretrained initialization, everything trainable.
    #[serde(rename = "FT")]
    FineTune,
    /// Pretrained and frozen backbone; only the head trains.
    #[serde(rename = "RC")]
    RetrainClassifier,
}

impl Regime {
    /// Table order.
    pub const ALL: [Regime; 3] = [Regime::Scratch, Regime::FineTune, Regime::RetrainClassifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "SCR",
            Regime::FineTune => "FT",
            Regime::RetrainClassifier => "RC",
        }
    }

    pub fn needs_pretrained(self) -> bool {
        self != Regime::Scratch
    }

    pub fn backbone_frozen(self) -> bool {
        self == Regime::RetrainClassifier
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParams(format!("unknown regime {s:?}")))
    }
}

/// Concrete architecture: family plus profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneId,
    #[serde(default)]
    pub profile: Profile,
}

enum Arch {
    ResNet(ResNetConfig),
    DenseNet(DenseNetConfig),
}

impl ModelSpec {
    pub fn new(backbone: BackboneId, profile: Profile) -> Self {
        Self { backbone, profile }
    }

    fn arch(&self) -> Arch {
        match (self.backbone, self.profile) {
            (BackboneId::Resnet18, Profile::Standard) => Arch::ResNet(ResNetConfig::RESNET18),
            (BackboneId::Resnet18, Profile::Compact) => Arch::ResNet(ResNetConfig {
                stem: 16,
                planes: [16, 32, 64, 128],
                ..ResNetConfig::RESNET18
            }),
            (BackboneId::SeResnext50, Profile::Standard) => {
                Arch::ResNet(ResNetConfig::SE_RESNEXT50_32X4D)
            }
            // 8 groups of 4 channels in the first stage, like 32x4d at full width
            (BackboneId::SeResnext50, Profile::Compact) => Arch::ResNet(ResNetConfig {
                stem: 16,
                planes: [16, 32, 64, 128],
                depths: [3, 4, 6, 3],
                block: BlockKind::SeBottleneck {
                    groups: 8,
                    base_width: 16,
                    se_reduction: 16,
                },
            }),
            (BackboneId::Densenet121, Profile::Standard) => {
                Arch::DenseNet(DenseNetConfig::DENSENET121)
            }
            (BackboneId::Densenet121, Profile::Compact) => Arch::DenseNet(DenseNetConfig {
                growth: 8,
                init_features: 16,
                ..DenseNetConfig::DENSENET121
            }),
        }
    }

    pub fn feature_width(&self) -> usize {
        match self.arch() {
            Arch::ResNet(c) => c.feature_width(),
            Arch::DenseNet(c) => c.feature_width(),
        }
    }

    /// Default file name inside a checkpoint directory.
    pub fn checkpoint_file_name(&self) -> String {
        format!("{}-{}.safetensors", self.backbone, self.profile.as_str())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.backbone, self.profile.as_str())
    }
}

/// Convolutional feature extractor ending in global average pooling.
pub struct Backbone {
    spec: ModelSpec,
    body: Sequential,
    feature_width: usize,
}

impl Backbone {
    pub fn new(spec: ModelSpec, rng: &mut Stream) -> Self {
        let body = match spec.arch() {
            Arch::ResNet(c) => resnet::build(&c, rng),
            Arch::DenseNet(c) => densenet::build(&c, rng),
        };
        Self {
            spec,
            body,
            feature_width: spec.feature_width(),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        self.body.forward(x, pass)
    }

    pub fn backward(&mut self, grad: &Tensor) {
        self.body.backward(grad);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.body.params(&mut v);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.body.params_mut(&mut v);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestScope {
    Backbone,
    Head,
    All,
}

/// Backbone, dropout and a fresh two-output affine head.
pub struct ClassifierModel {
    backbone: Backbone,
    head: Linear,
    regime: Regime,
    dropout_p: f32,
    seed: u64,
    dropout_mask: Option<Vec<f32>>,
}

impl fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("spec", &self.spec())
            .field("regime", &self.regime)
            .field("dropout_p", &self.dropout_p)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

/// Builds a classifier for `regime`. `pretrained` must be given for FT and RC;
/// it is ignored for SCR.
pub fn build_model(
    spec: ModelSpec,
    regime: Regime,
    dropout_p: f32,
    seed: u64,
    pretrained: Option<&Checkpoint>,
) -> Result<ClassifierModel> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::InvalidParams(format!(
            "dropout probability {dropout_p} outside [0, 1)"
        )));
    }
    let mut backbone = Backbone::new(spec, &mut rng::substream(seed, "backbone-init", &[]));
    if regime.needs_pretrained() {
        let ck = pretrained.ok_or_else(|| {
            Error::Checkpoint(format!(
                "pretrained weights for {spec} unavailable; regime {regime} needs them"
            ))
        })?;
        ck.apply(&mut backbone.params_mut())?;
    }
    let head = Linear::new(
        "head",
        backbone.feature_width(),
        NUM_CLASSES,
        &mut rng::substream(seed, "head-init", &[]),
    );
    let mut model = ClassifierModel {
        backbone,
        head,
        regime,
        dropout_p,
        seed,
        dropout_mask: None,
    };
    model.apply_trainable_mask();
    Ok(model)
}

impl ClassifierModel {
    fn apply_trainable_mask(&mut self) {
        let frozen = self.regime.backbone_frozen();
        for p in self.backbone.params_mut() {
            p.trainable = !frozen && p.kind == ParamKind::Weight;
        }
        for p in self.head_params_mut() {
            p.trainable = true;
        }
    }

    pub fn spec(&self) -> ModelSpec {
        self.backbone.spec()
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn dropout_p(&self) -> f32 {
        self.dropout_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_width(&self) -> usize {
        self.backbone.feature_width()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head_params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.head.params(&mut v);
        v
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.head.params_mut(&mut v);
        v
    }

    /// Parameters (and normalization statistics) in `scope`.
    pub fn params(&self, scope: DigestScope) -> Vec<&Param> {
        match scope {
            DigestScope::Backbone => self.backbone.params(),
            DigestScope::Head => self.head_params(),
            DigestScope::All => {
                let mut v = self.backbone.params();
                v.extend(self.head_params());
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        self.head.params_mut(&mut v);
        v
    }

    /// Learnable parameter count (normalization statistics excluded).
    pub fn parameter_count(&self, scope: DigestScope) -> usize {
        self.params(scope)
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.numel())
            .sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params(DigestScope::All)
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel())
            .sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[0] == 0 || s[2] < 32 || s[3] < 32 {
            return Err(Error::Shape(format!(
                "expected a [B, 3, H, W] batch with B >= 1 and H, W >= 32, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Pooled backbone features under evaluation statistics; nothing recorded.
    pub fn features(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        Ok(self.backbone.forward(batch, Pass::EVAL))
    }

    /// `[B, 3, H, W] -> [B, 2]` logits. In train mode dropout is active
    /// (drawing from `rng`), activations are recorded for `backward`, and a
    /// trainable backbone uses batch statistics; a frozen (RC) backbone
    /// always runs on its stored statistics.
    pub fn forward(&mut self, batch: &Tensor, train_mode: bool, rng: &mut Stream) -> Result<Tensor> {
        self.check_input(batch)?;
        let pass = if train_mode && !self.regime.backbone_frozen() {
            Pass::TRAIN
        } else {
            Pass::EVAL
        };
        let feats = self.backbone.forward(batch, pass);
        self.head_forward(&feats, train_mode, rng)
    }

    /// Head applied to precomputed features (`[B, feature_width]`).
    pub fn head_forward(&mut self, feats: &Tensor, train_mode: bool, rng: &mut Stream) -> Result<Tensor> {
        if feats.shape().len() != 2 || feats.shape()[1] != self.feature_width() {
            return Err(Error::Shape(format!(
                "head expects [B, {}] features, got {:?}",
                self.feature_width(),
                feats.shape()
            )));
        }
        if !train_mode {
            self.dropout_mask = None;
            return Ok(self.head.forward(feats, Pass::EVAL));
        }
        let mut x = feats.clone();
        if self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            let mask: Vec<f32> = (0..x.len())
                .map(|_| {
                    if rng.random::<f32>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            self.dropout_mask = Some(mask);
        } else {
            self.dropout_mask = None;
        }
        Ok(self.head.forward(&x, Pass::TRAIN))
    }

    /// Backpropagates logit gradients from the last train-mode forward.
    /// Gradients reach the backbone only when it is trainable and the
    /// forward pass went through it.
    pub fn backward(&mut self, grad_logits: &Tensor, through_backbone: bool) {
        let mut g = self.head.backward(grad_logits);
        if let Some(mask) = self.dropout_mask.take() {
            for (v, m) in g.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        if through_backbone && !self.regime.backbone_frozen() {
            self.backbone.backward(&g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Digest of the learnable parameters in `scope`.
    pub fn digest(&self, scope: DigestScope) -> String {
        let weights: Vec<&Param> = self
            .params(scope)
            .into_iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .collect();
        parameter_digest(&weights)
    }

    /// Digest of parameters and normalization statistics in `scope`.
    pub fn state_digest(&self, scope: DigestScope) -> String {
        parameter_digest(&self.params(scope))
    }

    fn metadata(&self, extra: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        let mut m = extra.clone();
        m.insert("backbone".into(), self.spec().backbone.to_string());
        m.insert("profile".into(), self.spec().profile.as_str().into());
        m.insert("regime".into(), self.regime.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("dropout_p".into(), self.dropout_p.to_string());
        m
    }

    /// Writes all parameters to a safetensors file plus a `.json` sidecar
    /// holding the metadata (and any `extra` entries such as a config digest).
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let meta = self.metadata(extra);
        Checkpoint::from_params(self.params(DigestScope::All), meta.clone()).write(path)?;
        let sidecar = path.with_extension("json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    /// Restores a model written by [`ClassifierModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: metadata lacks {k}", path.display())))
        };
        let spec = ModelSpec::new(get("backbone")?.parse()?, get("profile")?.parse()?);
        let regime: Regime = get("regime")?.parse()?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("seed: {e}")))?;
        let dropout_p: f32 = get("dropout_p")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("dropout_p: {e}")))?;
        let mut model = build_model(spec, Regime::Scratch, dropout_p, seed, None)?;
        model.regime = regime;
        ck.apply(&mut model.params_mut())?;
        model.apply_trainable_mask();
        Ok(model)
    }
}

/// sha256 over `(name, shape, little-endian values)` of each param, sorted by
/// name. Equal iff the selected tensors are bit-identical.
pub fn parameter_digest(params: &[&Param]) -> String {
    let mut sorted: Vec<&&Param> = params.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for p in sorted {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update((p.shape.len() as u64).to_le_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A backbone's parameters as a checkpoint (used for surrogate pretraining
/// output and in tests).
pub fn backbone_checkpoint(backbone: &Backbone, metadata: BTreeMap<String, String>) -> Checkpoint {
    Checkpoint::from_params(backbone.params(), metadata)
}
