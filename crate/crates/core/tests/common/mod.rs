#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use lesionlab::dataset::{DatasetManifest, LabelCounts, LesionLabel};
use lesionlab::modelkit::checkpoint::Checkpoint;
use lesionlab::modelkit::pretrain::{pretrain, PretrainConfig};
use lesionlab::modelkit::{backbone_checkpoint, Backbone, BackboneId, ModelSpec, Profile};
use lesionlab::phantom::{generate_dataset, PhantomParams};
use lesionlab::pipeline::PreprocessSpec;
use lesionlab::rng::substream;
use lesionlab::splits::Fold;
use lesionlab::trainer::{class_weights, AdamConfig, TrainConfig};

pub fn compact18() -> ModelSpec {
    ModelSpec::new(BackboneId::Resnet18, Profile::Compact)
}

/// Small, fast images: 60x80 phantoms fed to the network at 64x64.
pub fn small_params(bm_brightness: f64, speckle_scale: f64, images_per_lesion: usize) -> PhantomParams {
    PhantomParams {
        image_height_px: 60,
        image_width_px: 80,
        epithelium_depth_px: [12, 24],
        bm_brightness,
        speckle_scale,
        images_per_lesion,
        ..PhantomParams::default()
    }
}

pub fn small_phantom(dir: &Path, n_benign: usize, n_invasive: usize, params: &PhantomParams) -> DatasetManifest {
    generate_dataset(params, n_benign, n_invasive, dir).unwrap()
}

pub fn small_preprocess() -> PreprocessSpec {
    PreprocessSpec {
        target_height_px: 64,
        target_width_px: 64,
        ..PreprocessSpec::default()
    }
}

/// Randomly initialized backbone standing in for pretrained weights.
pub fn random_checkpoint(spec: ModelSpec, seed: u64) -> Checkpoint {
    let bb = Backbone::new(spec, &mut substream(seed, "stand-in", &[]));
    backbone_checkpoint(&bb, BTreeMap::new())
}

/// A few texture-pretraining steps; enough to give non-trivial features.
pub fn quick_pretrained(spec: ModelSpec) -> Checkpoint {
    let cfg = PretrainConfig {
        image_size: 48,
        steps: 20,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    pretrain(spec, &cfg).unwrap().0
}

pub fn fold_weights(manifest: &DatasetManifest, fold: &Fold) -> [f64; 2] {
    let mut counts = LabelCounts::default();
    for id in &fold.train {
        let l = manifest.lesion(id).unwrap();
        counts.add(l.label, l.images.len());
    }
    class_weights(counts).unwrap()
}

pub fn train_cfg(learning_rate: f64, epochs: usize, class_weights: [f64; 2]) -> TrainConfig {
    TrainConfig {
        learning_rate,
        batch_size: 5,
        epochs,
        optimizer: AdamConfig::default(),
        class_weights,
        seed: 3,
    }
}

pub fn rare() -> LesionLabel {
    LesionLabel::Invasive
}
