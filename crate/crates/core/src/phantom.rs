//! Synthetic layered-tissue OCT B-scans.
//!
//! Each image is, top to bottom: an optional bright hyperkeratotic band, a
//! dark epithelium, a one-pixel bright basement-membrane (BM) line, and a
//! brighter textured lamina propria. Invasive lesions lose the BM line over a
//! contiguous column interval, where the epithelium/lamina border becomes an
//! irregular ramp. Multiplicative gamma speckle and exponential depth
//! attenuation are applied last.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_manifest, DatasetManifest, ImageRef, LabelCounts, LesionLabel, LesionRecord};
use crate::error::{Error, Result};
use crate::imaging::{write_gray_png, Image};
use crate::rng::{substream, Stream};

pub const EPITHELIUM_LEVEL: f64 = 60.0;
pub const LAMINA_LEVEL: f64 = 130.0;
pub const HYPERKERATOSIS_LEVEL: f64 = 180.0;
/// Rows over which the epithelium/lamina border is smeared in invaded columns.
const RAMP_ROWS: f64 = 12.0;
/// Texture amplitude in intensity units per unit of speckle_scale.
const TEXTURE_GAIN: f64 = 60.0;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "phantom.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub image_height_px: usize,
    pub image_width_px: usize,
    /// Inclusive [min, max] depth of the BM line below the top row.
    pub epithelium_depth_px: [usize; 2],
    pub bm_brightness: f64,
    /// Fraction of columns without a BM line in invasive images.
    pub bm_disruption: f64,
    pub hyperkeratosis_prob: f64,
    pub speckle_scale: f64,
    pub attenuation_per_px: f64,
    pub images_per_lesion: usize,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_height_px: 180,
            image_width_px: 260,
            epithelium_depth_px: [30, 60],
            bm_brightness: 0.6,
            bm_disruption: 0.6,
            hyperkeratosis_prob: 0.3,
            speckle_scale: 0.1,
            attenuation_per_px: 0.002,
            images_per_lesion: 4,
            seed: 7,
        }
    }
}

impl PhantomParams {
    /// Parameters from TOML text; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        let (h, w) = (self.image_height_px, self.image_width_px);
        if h == 0 || w == 0 {
            return bad(format!("image size {h}x{w} must be positive"));
        }
        let [lo, hi] = self.epithelium_depth_px;
        if lo == 0 || lo > hi || hi + 1 >= h {
            return bad(format!(
                "epithelium_depth_px [{lo}, {hi}] must satisfy 0 < min <= max < height - 1 ({h})"
            ));
        }
        for (name, v) in [
            ("bm_brightness", self.bm_brightness),
            ("bm_disruption", self.bm_disruption),
            ("hyperkeratosis_prob", self.hyperkeratosis_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("speckle_scale", self.speckle_scale),
            ("attenuation_per_px", self.attenuation_per_px),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if self.images_per_lesion == 0 {
            return bad("images_per_lesion must be positive".into());
        }
        Ok(())
    }

    fn bm_level(&self) -> f64 {
        LAMINA_LEVEL + self.bm_brightness * (255.0 - LAMINA_LEVEL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    /// Single channel, integer-valued intensities in [0, 255].
    pub pixels: Image,
    /// BM row per column; `None` where the line was removed.
    pub true_bm_rows: Vec<Option<usize>>,
}

/// Morphology shared by every image of one lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMorphology {
    depth_mean: f64,
    wave_amp: f64,
    wave_period: f64,
    wave_phase: f64,
    hyperkeratosis_rows: Option<usize>,
    /// First column and width of the invaded interval.
    disruption: Option<(usize, usize)>,
    /// Extra border depth per column inside the invaded interval.
    invasion_front: Vec<f64>,
    texture: [(f64, f64, f64); 3],
}

impl LesionMorphology {
    pub fn sample(label: LesionLabel, params: &PhantomParams, rng: &mut Stream) -> Result<Self> {
        params.validate()?;
        let [lo, hi] = params.epithelium_depth_px;
        let (lo, hi) = (lo as f64, hi as f64);
        let w = params.image_width_px;
        let depth_mean = rng.random_range(lo..=hi);
        let wave_amp = rng.random_range(0.0..=((hi - lo) / 4.0).min(6.0));
        let wave_period = rng.random_range(0.5..2.0) * w as f64;
        let wave_phase = rng.random_range(0.0..TAU);
        let hyperkeratosis_rows = rng
            .random_bool(params.hyperkeratosis_prob)
            .then(|| rng.random_range(4..=10usize));
        let disruption = match label {
            LesionLabel::Benign => None,
            LesionLabel::Invasive => {
                if params.bm_disruption <= 0.0 {
                    return Err(Error::InvalidParams(
                        "invasive images need bm_disruption > 0".into(),
                    ));
                }
                let len = ((params.bm_disruption * w as f64).round() as usize).clamp(1, w);
                Some((rng.random_range(0..=w - len), len))
            }
        };
        // random walk, kept non-negative so invasion only pushes downward
        let mut front = Vec::with_capacity(w);
        let mut depth: f64 = rng.random_range(2.0..10.0);
        for _ in 0..w {
            depth = (depth + rng.random_range(-3.0..3.0)).clamp(0.0, 18.0);
            front.push(depth);
        }
        let mut texture = [(0.0, 0.0, 0.0); 3];
        for t in &mut texture {
            *t = (
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
                rng.random_range(0.0..TAU),
            );
        }
        Ok(Self {
            depth_mean,
            wave_amp,
            wave_period,
            wave_phase,
            hyperkeratosis_rows,
            disruption,
            invasion_front: front,
            texture,
        })
    }

    pub fn label(&self) -> LesionLabel {
        if self.disruption.is_some() {
            LesionLabel::Invasive
        } else {
            LesionLabel::Benign
        }
    }
}

/// Draws a fresh morphology and renders one image from it.
pub fn generate_image(label: LesionLabel, params: &PhantomParams, rng: &mut Stream) -> Result<PhantomImage> {
    let morph = LesionMorphology::sample(label, params, rng)?;
    render(&morph, params, rng)
}

/// Renders one image of a lesion; per-image variation is a small shift of
/// the layer geometry plus independent speckle.
pub fn render(morph: &LesionMorphology, params: &PhantomParams, rng: &mut Stream) -> Result<PhantomImage> {
    params.validate()?;
    let (h, w) = (params.image_height_px, params.image_width_px);
    let [lo, hi] = params.epithelium_depth_px;
    let dy: i64 = rng.random_range(-2..=2);
    let dx: i64 = rng.random_range(-4..=4);

    let invaded = morph.disruption.map(|(start, len)| {
        let start = (start as i64 + dx).clamp(0, (w - len) as i64) as usize;
        start..start + len
    });
    let mut bm_rows = Vec::with_capacity(w);
    for c in 0..w {
        let x = (c as i64 + dx) as f64;
        let wave = morph.wave_amp * (TAU * x / morph.wave_period + morph.wave_phase).sin();
        let d = ((morph.depth_mean + wave).round() as i64 + dy).clamp(lo as i64, hi as i64);
        let removed = invaded.as_ref().is_some_and(|r| r.contains(&c));
        bm_rows.push((!removed).then_some(d as usize));
    }

    let bm_level = params.bm_level();
    let tex_amp = TEXTURE_GAIN * params.speckle_scale;
    let speckle = if params.speckle_scale > 0.0 {
        let k = 1.0 / (params.speckle_scale * params.speckle_scale);
        Some(Gamma::new(k, 1.0 / k).map_err(|e| Error::InvalidParams(format!("speckle: {e}")))?)
    } else {
        None
    };
    let hk = morph.hyperkeratosis_rows.unwrap_or(0);

    let mut data = vec![0.0f32; h * w];
    for r in 0..h {
        let atten = (-params.attenuation_per_px * r as f64).exp();
        for c in 0..w {
            let texture = || {
                let x = (c as i64 + dx) as f64;
                let y = r as f64 - dy as f64;
                morph.texture.iter().map(|&(fy, fx, p)| (fy * y + fx * x + p).sin()).sum::<f64>() / 3.0
            };
            let mut v = match bm_rows[c] {
                Some(d) if r < d => EPITHELIUM_LEVEL,
                Some(d) if r == d => bm_level,
                Some(_) => LAMINA_LEVEL + tex_amp * texture(),
                None => {
                    let x = (c as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let wave = morph.wave_amp
                        * (TAU * (c as i64 + dx) as f64 / morph.wave_period + morph.wave_phase).sin();
                    let border = morph.depth_mean + wave + dy as f64 + morph.invasion_front[x];
                    let t = ((r as f64 - border) / RAMP_ROWS + 0.5).clamp(0.0, 1.0);
                    EPITHELIUM_LEVEL + t * (LAMINA_LEVEL - EPITHELIUM_LEVEL + tex_amp * texture())
                }
            };
            if r < hk {
                v = HYPERKERATOSIS_LEVEL;
            }
            if let Some(g) = &speckle {
                v *= g.sample(rng);
            }
            data[r * w + c] = (v * atten).clamp(0.0, 255.0).round() as f32;
        }
    }
    Ok(PhantomImage {
        pixels: Image::new(1, h, w, data)?,
        true_bm_rows: bm_rows,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    n_benign: usize,
    n_invasive: usize,
    params: PhantomParams,
}

/// Writes `n_benign + n_invasive` lesions of `images_per_lesion` PNGs under
/// `out_dir/images/`, a manifest at `out_dir/manifest.csv` and the generation
/// parameters in `out_dir/phantom.toml`. Labels are shuffled over lesion ids.
pub fn generate_dataset(
    params: &PhantomParams,
    n_benign: usize,
    n_invasive: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    if n_benign == 0 || n_invasive == 0 {
        return Err(Error::InvalidParams(format!(
            "need at least one lesion per label, got {n_benign} benign and {n_invasive} invasive"
        )));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut labels: Vec<LesionLabel> = std::iter::repeat_n(LesionLabel::Benign, n_benign)
        .chain(std::iter::repeat_n(LesionLabel::Invasive, n_invasive))
        .collect();
    labels.shuffle(&mut substream(params.seed, "phantom-labels", &[]));

    let digits = (labels.len().to_string().len()).max(3);
    let mut lesions = Vec::with_capacity(labels.len());
    for (li, &label) in labels.iter().enumerate() {
        let lesion_id = format!("L{:0digits$}", li + 1);
        let mut rng = substream(params.seed, "phantom-lesion", &[li as u64]);
        let morph = LesionMorphology::sample(label, params, &mut rng)?;
        let mut images = Vec::with_capacity(params.images_per_lesion);
        for i in 0..params.images_per_lesion {
            let mut rng = substream(params.seed, "phantom-image", &[li as u64, i as u64]);
            let img = render(&morph, params, &mut rng)?;
            let image_id = format!("{lesion_id}_{i}");
            let rel = PathBuf::from("images").join(format!("{image_id}.png"));
            let (h, w) = (img.pixels.height(), img.pixels.width());
            write_gray_png(&out_dir.join(&rel), h, w, &img.pixels.to_gray_u8())?;
            images.push(ImageRef {
                image_id,
                path: rel,
                height_px: h,
                width_px: w,
            });
        }
        lesions.push(LesionRecord {
            lesion_id,
            label,
            images,
            site: None,
        });
    }
    let manifest = DatasetManifest::new(out_dir, lesions)?;
    debug_assert_eq!(manifest.counts(), LabelCounts::new(n_benign, n_invasive));
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;

    let sidecar = Sidecar {
        n_benign,
        n_invasive,
        params: *params,
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let sc = out_dir.join(SIDECAR_FILE);
    std::fs::write(&sc, text).map_err(|e| Error::io(&sc, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PhantomParams {
        PhantomParams {
            speckle_scale: 0.0,
            ..PhantomParams::default()
        }
    }

    fn px(img: &Image, r: usize, c: usize) -> f64 {
        f64::from(img.get(0, r, c))
    }

    fn band_mean(img: &Image, rows: impl Iterator<Item = usize> + Clone, c: usize) -> f64 {
        let n = rows.clone().count() as f64;
        rows.map(|r| px(img, r, c)).sum::<f64>() / n
    }

    /// Mean over columns of (line row) minus mean of the 5-row bands around it.
    fn line_margin(img: &Image, rows: &[usize]) -> f64 {
        let mut total = 0.0;
        for (c, &r) in rows.iter().enumerate() {
            let above = band_mean(img, r - 5..r, c);
            let below = band_mean(img, r + 1..r + 6, c);
            total += px(img, r, c) - 0.5 * (above + below);
        }
        total / rows.len() as f64
    }

    #[test]
    fn benign_bm_line_stands_out_by_margin() {
        for seed in 0..20 {
            let p = PhantomParams {
                bm_brightness: 0.8,
                ..quiet()
            };
            let img = generate_image(LesionLabel::Benign, &p, &mut substream(seed, "t", &[])).unwrap();
            let rows: Vec<usize> = img.true_bm_rows.iter().map(|r| r.unwrap()).collect();
            let m = line_margin(&img.pixels, &rows);
            assert!(m >= 0.5 * 0.8 * 255.0, "seed {seed}: margin {m}");
        }
    }

    #[test]
    fn disabled_effects_give_step_profiles() {
        let p = PhantomParams {
            bm_brightness: 0.0,
            attenuation_per_px: 0.0,
            hyperkeratosis_prob: 0.0,
            ..quiet()
        };
        let img = generate_image(LesionLabel::Benign, &p, &mut substream(3, "t", &[])).unwrap();
        for (c, d) in img.true_bm_rows.iter().enumerate() {
            let d = d.unwrap();
            for r in 0..p.image_height_px {
                let want = if r < d { EPITHELIUM_LEVEL } else { LAMINA_LEVEL };
                assert_eq!(px(&img.pixels, r, c), want, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn full_disruption_removes_every_line() {
        for seed in 0..10 {
            let p = PhantomParams {
                bm_disruption: 1.0,
                bm_brightness: 0.8,
                ..quiet()
            };
            let img = generate_image(LesionLabel::Invasive, &p, &mut substream(seed, "t", &[])).unwrap();
            assert!(img.true_bm_rows.iter().all(Option::is_none));
            let h = p.image_height_px;
            let w = p.image_width_px;
            for r in 5..h - 5 {
                let m = line_margin(&img.pixels, &vec![r; w]);
                assert!(m < 0.5 * 0.8 * 255.0, "seed {seed} row {r}: {m}");
            }
        }
    }

    #[test]
    fn partial_disruption_is_one_contiguous_interval() {
        let p = PhantomParams {
            bm_disruption: 0.4,
            ..quiet()
        };
        let img = generate_image(LesionLabel::Invasive, &p, &mut substream(1, "t", &[])).unwrap();
        let missing: Vec<usize> = (0..p.image_width_px)
            .filter(|&c| img.true_bm_rows[c].is_none())
            .collect();
        assert_eq!(missing.len(), (0.4f64 * 260.0).round() as usize);
        assert_eq!(missing.last().unwrap() - missing[0] + 1, missing.len());
    }

    #[test]
    fn images_are_byte_valued_and_sized() {
        let p = PhantomParams {
            speckle_scale: 0.5,
            ..PhantomParams::default()
        };
        for label in LesionLabel::ALL {
            let img = generate_image(label, &p, &mut substream(9, "t", &[])).unwrap();
            assert_eq!((img.pixels.height(), img.pixels.width()), (180, 260));
            assert!(img
                .pixels
                .data()
                .iter()
                .all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let cases = [
            PhantomParams { bm_brightness: 1.5, ..PhantomParams::default() },
            PhantomParams { epithelium_depth_px: [30, 180], ..PhantomParams::default() },
            PhantomParams { epithelium_depth_px: [50, 40], ..PhantomParams::default() },
            PhantomParams { speckle_scale: -0.1, ..PhantomParams::default() },
            PhantomParams { images_per_lesion: 0, ..PhantomParams::default() },
            PhantomParams { image_width_px: 0, ..PhantomParams::default() },
        ];
        for p in cases {
            assert!(generate_image(LesionLabel::Benign, &p, &mut substream(0, "t", &[])).is_err(), "{p:?}");
        }
        let p = PhantomParams { bm_disruption: 0.0, ..PhantomParams::default() };
        assert!(generate_image(LesionLabel::Invasive, &p, &mut substream(0, "t", &[])).is_err());
        assert!(generate_image(LesionLabel::Benign, &p, &mut substream(0, "t", &[])).is_ok());
    }

    /// Column has a line if some row within the depth window beats its
    /// neighbouring bands by 50; image is benign if 90% of columns do.
    fn oracle_says_benign(img: &Image, p: &PhantomParams) -> bool {
        let [lo, hi] = p.epithelium_depth_px;
        let w = img.width();
        let lined = (0..w)
            .filter(|&c| {
                (lo.saturating_sub(3).max(5)..=hi + 3).any(|r| {
                    px(img, r, c) - 0.5 * (band_mean(img, r - 5..r, c) + band_mean(img, r + 1..r + 6, c))
                        >= 50.0
                })
            })
            .count();
        lined as f64 >= 0.9 * w as f64
    }

    fn oracle_accuracy(b: f64) -> f64 {
        let p = PhantomParams {
            bm_brightness: b,
            ..quiet()
        };
        let mut correct = 0;
        let n = 20;
        for i in 0..n {
            let label = if i % 2 == 0 { LesionLabel::Benign } else { LesionLabel::Invasive };
            let img = generate_image(label, &p, &mut substream(11, "oracle", &[i])).unwrap();
            if oracle_says_benign(&img.pixels, &p) == (label == LesionLabel::Benign) {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }

    #[test]
    fn oracle_accuracy_falls_with_bm_brightness() {
        let accs: Vec<f64> = [0.9, 0.5, 0.05].into_iter().map(oracle_accuracy).collect();
        assert_eq!(accs[0], 1.0, "{accs:?}");
        assert_eq!(accs[1], 1.0, "{accs:?}");
        assert!(accs[2] <= 0.6, "{accs:?}");
        assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
    }

    #[test]
    fn dataset_has_requested_composition() {
        let dir = tempfile::tempdir().unwrap();
        let p = PhantomParams {
            images_per_lesion: 1,
            ..PhantomParams::default()
        };
        let m = generate_dataset(&p, 1, 1, dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.image_count(), 2);
        assert_eq!(m.counts(), LabelCounts::new(1, 1));
        let back = crate::dataset::load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.lesions(), m.lesions());
        assert!(dir.path().join(SIDECAR_FILE).is_file());
    }

    #[test]
    fn zero_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&PhantomParams::default(), 0, 1, dir.path()).is_err());
        assert!(generate_dataset(&PhantomParams::default(), 1, 0, dir.path()).is_err());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let p = PhantomParams {
            images_per_lesion: 2,
            ..PhantomParams::default()
        };
        generate_dataset(&p, 3, 2, a.path()).unwrap();
        generate_dataset(&p, 3, 2, b.path()).unwrap();
        for rel in [MANIFEST_FILE, SIDECAR_FILE, "images/L001_0.png", "images/L005_1.png"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }
}
