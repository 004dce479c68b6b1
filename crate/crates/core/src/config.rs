//! Run and matrix configuration files (TOML). Every field has a default, so
//! an otherwise empty file only needs `manifest_path` and `output_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LesionLabel;
use crate::error::{Error, Result};
use crate::modelkit::{BackboneId, ModelSpec, Profile, Regime};
use crate::pipeline::{AugmentSpec, ChannelMode, Interpolation, Normalization, PreprocessSpec, DEFAULT_INPUT_SIZE};
use crate::splits::DEFAULT_VAL_COMMON;
use crate::trainer::{AdamConfig, TrainConfig};

/// Input standardization. `auto` uses the pretrained statistics for FT and RC
/// and statistics of the fold's training images for SCR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    #[default]
    Auto,
    Pretrained,
    Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub target_height_px: usize,
    pub target_width_px: usize,
    pub normalization: NormalizationMode,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            target_height_px: DEFAULT_INPUT_SIZE,
            target_width_px: DEFAULT_INPUT_SIZE,
            normalization: NormalizationMode::Auto,
        }
    }
}

impl PreprocessSection {
    /// Whether this run needs statistics of the fold's training images.
    pub fn uses_dataset_stats(&self, regime: Regime) -> bool {
        match self.normalization {
            NormalizationMode::Auto => regime == Regime::Scratch,
            NormalizationMode::Pretrained => false,
            NormalizationMode::Dataset => true,
        }
    }

    /// Spec with the given normalization (pretrained stats when `None`).
    pub fn spec(&self, normalization: Option<Normalization>) -> PreprocessSpec {
        PreprocessSpec {
            target_height_px: self.target_height_px,
            target_width_px: self.target_width_px,
            interpolation: Interpolation::BilinearHalfPixel,
            channel_mode: ChannelMode::ReplicateGray,
            normalization: normalization.unwrap_or(Normalization::PretrainedStats),
        }
    }
}

/// `"auto"` (per-fold inverse frequency of training images) or a fixed
/// `[benign, invasive]` pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeightSetting {
    #[default]
    #[serde(with = "auto_literal")]
    Auto,
    Fixed([f64; 2]),
}

mod auto_literal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"auto\" or [benign, invasive], got {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub class_weights: ClassWeightSetting,
    pub dropout_p: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 5,
            epochs: 30,
            optimizer: AdamConfig::default(),
            class_weights: ClassWeightSetting::Auto,
            dropout_p: 0.2,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, class_weights: [f64; 2], seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            class_weights,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub rare_label: LesionLabel,
    pub n_val_common: usize,
    pub seed: u64,
    pub folds: Option<usize>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            rare_label: LesionLabel::Invasive,
            n_val_common: DEFAULT_VAL_COMMON,
            seed: 1,
            folds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub backbone: BackboneId,
    pub profile: Profile,
    pub regime: Regime,
    /// Pretrained backbone file; the checkpoint cache is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub global_seed: u64,
    pub train: TrainSection,
    pub preprocess: PreprocessSection,
    pub augment: AugmentSpec,
    pub split: SplitSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest_path: PathBuf::from("data/manifest.csv"),
            backbone: BackboneId::Resnet18,
            profile: Profile::Standard,
            regime: Regime::RetrainClassifier,
            checkpoint: None,
            output_dir: PathBuf::from("runs/default"),
            global_seed: 0,
            train: TrainSection::default(),
            preprocess: PreprocessSection::default(),
            augment: AugmentSpec::default(),
            split: SplitSection::default(),
        }
    }
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Relative paths in a config file are taken relative to the file.
fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = parse_toml(path)?;
        cfg.rebase_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        rebase(base, &mut self.manifest_path);
        rebase(base, &mut self.output_dir);
        if let Some(c) = &mut self.checkpoint {
            rebase(base, c);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.backbone, self.profile)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        t.train_config([0.5, 0.5], 0).validate()?;
        if let ClassWeightSetting::Fixed(w) = t.class_weights {
            t.train_config(w, 0).validate()?;
        }
        if !(0.0..1.0).contains(&t.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", t.dropout_p)));
        }
        self.preprocess.spec(None).validate()?;
        self.augment.validate()?;
        if self.split.n_val_common == 0 {
            return Err(Error::Config("split.n_val_common must be positive".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form, ignoring `output_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Row label, e.g. `Resnet18 RC`.
    pub fn label(&self) -> String {
        format!("{} {}", self.backbone.display_name(), self.regime)
    }
}

/// Backbones × regimes over shared settings. Backbone and regime names are
/// kept as text so that a bad entry is reported before anything runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMatrix {
    pub backbones: Vec<String>,
    #[serde(default = "all_regimes")]
    pub regimes: Vec<String>,
    #[serde(default = "yes")]
    pub human_reference: bool,
    /// Pretrained files per backbone id; others come from the cache.
    #[serde(default)]
    pub checkpoints: std::collections::BTreeMap<String, PathBuf>,
    pub shared: RunConfig,
}

fn all_regimes() -> Vec<String> {
    Regime::ALL.iter().map(|r| r.as_str().to_string()).collect()
}

fn yes() -> bool {
    true
}

impl RunMatrix {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = parse_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.shared.rebase_paths(base);
        for p in m.checkpoints.values_mut() {
            rebase(base, p);
        }
        Ok(m)
    }

    /// One config per cell, in table order (per backbone: SCR, FT, RC).
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        self.shared.validate()?;
        let backbones = self
            .backbones
            .iter()
            .map(|b| b.parse::<BackboneId>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut regimes = self
            .regimes
            .iter()
            .map(|r| r.parse::<Regime>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        for id in self.checkpoints.keys() {
            id.parse::<BackboneId>().map_err(|e| Error::Config(e.to_string()))?;
        }
        if backbones.is_empty() || regimes.is_empty() {
            return Err(Error::Config("matrix needs at least one backbone and one regime".into()));
        }
        regimes.sort();
        regimes.dedup();
        let mut out = Vec::new();
        for b in backbones {
            for &r in &regimes {
                let mut c = self.shared.clone();
                c.backbone = b;
                c.regime = r;
                c.checkpoint = self.checkpoints.get(b.as_str()).cloned().or(c.checkpoint.clone());
                c.output_dir = self.shared.output_dir.join(format!("{}-{}", b, r));
                out.push(c);
            }
        }
        Ok(out)
    }
}
