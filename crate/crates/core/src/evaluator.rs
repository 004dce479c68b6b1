//! Lesion-level prediction, confusion-matrix metrics, fold aggregation and
//! the results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, LesionLabel, LesionRecord};
use crate::error::{Error, Result};
use crate::modelkit::{BackboneId, ClassifierModel, Regime};
use crate::pipeline::PreprocessSpec;
use crate::rng::substream;
use crate::splits::Fold;
use crate::trainer::{ImageStore, Loader, SampleSpec};

/// Lesions whose mean invasive probability reaches this are called invasive.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Counts with invasive as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: LesionLabel, predicted: LesionLabel) {
        match (truth, predicted) {
            (LesionLabel::Invasive, LesionLabel::Invasive) => self.tp += 1,
            (LesionLabel::Benign, LesionLabel::Invasive) => self.fp += 1,
            (LesionLabel::Benign, LesionLabel::Benign) => self.tn += 1,
            (LesionLabel::Invasive, LesionLabel::Benign) => self.fn_ += 1,
        }
    }
}

/// A ratio with a zero denominator; the affected rates are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    NoActualInvasive,
    NoActualBenign,
    NoPredictedInvasive,
    NoPredictedBenign,
}

/// Percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1_invasive: f64,
    pub f1_macro: f64,
}

impl Rates {
    fn fields(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.f1_invasive,
            self.f1_macro,
        ]
    }

    fn from_fields(v: [f64; 5]) -> Self {
        Self {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            f1_invasive: v[3],
            f1_macro: v[4],
        }
    }

    /// Arithmetic mean over `items`.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Rates>) -> Option<Rates> {
        let mut sum = [0.0; 5];
        let mut n = 0usize;
        for r in items {
            for (s, v) in sum.iter_mut().zip(r.fields()) {
                *s += v;
            }
            n += 1;
        }
        (n > 0).then(|| Rates::from_fields(sum.map(|s| s / n as f64)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub rates: Rates,
    pub degenerate: Vec<Degeneracy>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics> {
    let ConfusionMatrix { tp, fp, tn, fn_ } = *cm;
    if cm.total() == 0 {
        return Err(Error::InvalidParams("empty confusion matrix".into()));
    }
    let mut degenerate = Vec::new();
    for (cond, flag) in [
        (tp + fn_ == 0, Degeneracy::NoActualInvasive),
        (tn + fp == 0, Degeneracy::NoActualBenign),
        (tp + fp == 0, Degeneracy::NoPredictedInvasive),
        (tn + fn_ == 0, Degeneracy::NoPredictedBenign),
    ] {
        if cond {
            degenerate.push(flag);
        }
    }
    let f1_invasive = ratio(2 * tp, 2 * tp + fp + fn_);
    let f1_benign = ratio(2 * tn, 2 * tn + fn_ + fp);
    Ok(Metrics {
        rates: Rates {
            accuracy: ratio(tp + tn, cm.total()),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1_invasive,
            f1_macro: (f1_invasive + f1_benign) / 2.0,
        },
        degenerate,
    })
}

pub fn invasive_probability(logits: [f32; 2]) -> f64 {
    1.0 / (1.0 + (f64::from(logits[0]) - f64::from(logits[1])).exp())
}

fn predict_label(p: f64) -> LesionLabel {
    if p >= DECISION_THRESHOLD {
        LesionLabel::Invasive
    } else {
        LesionLabel::Benign
    }
}

/// Per-image invasive probabilities (in manifest order) and their mean.
pub fn predict_lesion<S: ImageStore>(
    model: &mut ClassifierModel,
    manifest: &DatasetManifest,
    lesion: &LesionRecord,
    preprocess: &PreprocessSpec,
    loader: &mut Loader<S>,
) -> Result<(f64, Vec<(String, f64)>)> {
    if lesion.images.is_empty() {
        return Err(Error::InvalidParams(format!("lesion {} has no images", lesion.lesion_id)));
    }
    let indices = manifest.image_indices();
    let spec = SampleSpec {
        preprocess,
        augment: None,
    };
    // eval mode draws nothing from this stream
    let mut rng = substream(0, "eval", &[]);
    let mut probs = Vec::with_capacity(lesion.images.len());
    for image in &lesion.images {
        let index = *indices.get(image.image_id.as_str()).ok_or_else(|| {
            Error::InvalidParams(format!("image {} is not in the manifest", image.image_id))
        })?;
        let feats = loader.features(model, manifest, &[(index, image)], spec)?;
        let logits = model.head_forward(&feats, false, &mut rng)?;
        probs.push((
            image.image_id.clone(),
            invasive_probability([logits.data()[0], logits.data()[1]]),
        ));
    }
    let mean = probs.iter().map(|(_, p)| p).sum::<f64>() / probs.len() as f64;
    Ok((mean, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub per_image_probs: BTreeMap<String, f64>,
    pub per_lesion_prob: BTreeMap<String, f64>,
    pub per_lesion_pred: BTreeMap<String, LesionLabel>,
    pub lesion_confusion: ConfusionMatrix,
    /// Image-level counts, for diagnostics only.
    pub image_confusion: ConfusionMatrix,
}

impl FoldResult {
    pub fn metrics(&self) -> Result<Metrics> {
        metrics_from_confusion(&self.lesion_confusion)
    }
}

/// Scores every validation lesion of `fold`.
pub fn evaluate_fold<S: ImageStore>(
    model: &mut ClassifierModel,
    manifest: &DatasetManifest,
    fold: &Fold,
    preprocess: &PreprocessSpec,
    loader: &mut Loader<S>,
) -> Result<FoldResult> {
    let mut result = FoldResult {
        fold_index: fold.fold_index,
        per_image_probs: BTreeMap::new(),
        per_lesion_prob: BTreeMap::new(),
        per_lesion_pred: BTreeMap::new(),
        lesion_confusion: ConfusionMatrix::default(),
        image_confusion: ConfusionMatrix::default(),
    };
    for id in fold.validation_ids() {
        let lesion = manifest
            .lesion(id)
            .ok_or_else(|| Error::InvalidParams(format!("validation lesion {id} is not in the manifest")))?;
        let (p, images) = predict_lesion(model, manifest, lesion, preprocess, loader)?;
        let pred = predict_label(p);
        result.lesion_confusion.record(lesion.label, pred);
        for (image_id, q) in images {
            result.image_confusion.record(lesion.label, predict_label(q));
            result.per_image_probs.insert(image_id, q);
        }
        result.per_lesion_prob.insert(id.to_string(), p);
        result.per_lesion_pred.insert(id.to_string(), pred);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub backbone: BackboneId,
    pub regime: Regime,
    pub profile: String,
    pub global_seed: u64,
    pub split_seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<Metrics>,
    pub mean: Rates,
    /// Image-level means, for diagnostics.
    pub image_mean: Rates,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn label(&self) -> String {
        format!("{} {}", self.meta.backbone.display_name(), self.meta.regime)
    }
}

/// Macro average over folds (per-fold metrics, then their mean).
pub fn aggregate(folds: &[FoldResult], meta: ReportMeta) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::InvalidParams("no fold results to aggregate".into()));
    }
    let per_fold = folds.iter().map(FoldResult::metrics).collect::<Result<Vec<_>>>()?;
    let image = folds
        .iter()
        .map(|f| metrics_from_confusion(&f.image_confusion).map(|m| m.rates))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        mean: Rates::mean(per_fold.iter().map(|m| &m.rates)).expect("non-empty"),
        image_mean: Rates::mean(&image).expect("non-empty"),
        per_fold,
        meta,
    })
}

/// A fixed row such as a human-rater baseline; `None` renders as `-`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl ReferenceRow {
    /// Reference human-rater line (sensitivity and specificity only).
    pub fn human_rater() -> Self {
        Self {
            label: "Human Rater".into(),
            accuracy: None,
            sensitivity: Some(81.50),
            specificity: Some(72.50),
            f1: None,
        }
    }
}

/// Which F1 variant fills the table's F1 column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Column {
    #[default]
    Macro,
    Invasive,
}

/// One table line.
#[derive(Debug, Clone, PartialEq)]
pub enum TableRow {
    Result(MetricsReport),
    Failed { label: String, reason: String },
    Reference(ReferenceRow),
}

pub const TABLE_HEADER: &str = "Model  Accuracy  Sensitivity  Specificity  F1";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

pub fn render_table(rows: &[TableRow], f1: F1Column) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for row in rows {
        let line = match row {
            TableRow::Result(r) => {
                let f = match f1 {
                    F1Column::Macro => r.mean.f1_macro,
                    F1Column::Invasive => r.mean.f1_invasive,
                };
                format!(
                    "{}  {:.2}  {:.2}  {:.2}  {:.2}",
                    r.label(),
                    r.mean.accuracy,
                    r.mean.sensitivity,
                    r.mean.specificity,
                    f
                )
            }
            TableRow::Failed { label, .. } => format!("{label}  failed  failed  failed  failed"),
            TableRow::Reference(r) => format!(
                "{}  {}  {}  {}  {}",
                r.label,
                cell(r.accuracy),
                cell(r.sensitivity),
                cell(r.specificity),
                cell(r.f1)
            ),
        };
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Results rows followed by reference rows, F1 column showing the macro F1.
pub fn render_report(reports: &[MetricsReport], reference_rows: &[ReferenceRow]) -> String {
    let rows: Vec<TableRow> = reports
        .iter()
        .cloned()
        .map(TableRow::Result)
        .chain(reference_rows.iter().cloned().map(TableRow::Reference))
        .collect();
    render_table(&rows, F1Column::Macro)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    results: &'a [MetricsReport],
    failed: Vec<(&'a str, &'a str)>,
    reference_rows: Vec<&'a ReferenceRow>,
}

/// Machine-readable companion to [`render_table`].
pub fn report_json(rows: &[TableRow]) -> String {
    let results: Vec<MetricsReport> = rows
        .iter()
        .filter_map(|r| match r {
            TableRow::Result(m) => Some(m.clone()),
            _ => None,
        })
        .collect();
    let file = ReportFile {
        results: &results,
        failed: rows
            .iter()
            .filter_map(|r| match r {
                TableRow::Failed { label, reason } => Some((label.as_str(), reason.as_str())),
                _ => None,
            })
            .collect(),
        reference_rows: rows
            .iter()
            .filter_map(|r| match r {
                TableRow::Reference(x) => Some(x),
                _ => None,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("report serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    fn meta(backbone: BackboneId, regime: Regime) -> ReportMeta {
        ReportMeta {
            backbone,
            regime,
            profile: "standard".into(),
            global_seed: 0,
            split_seed: 0,
            config_digest: String::new(),
        }
    }

    #[test]
    fn perfect_classifier() {
        let m = metrics_from_confusion(&cm(9, 0, 91, 0)).unwrap();
        assert_eq!(m.rates.fields(), [100.0; 5]);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn one_fold_with_two_false_positives() {
        let m = metrics_from_confusion(&cm(1, 2, 7, 0)).unwrap();
        assert_eq!(m.rates.sensitivity, 100.0);
        assert_eq!(format!("{:.2}", m.rates.specificity), "77.78");
        assert_eq!(format!("{:.2}", m.rates.accuracy), "80.00");
        assert_eq!(format!("{:.2}", m.rates.f1_invasive), "50.00");
    }

    #[test]
    fn missed_invasive_is_flagged() {
        let m = metrics_from_confusion(&cm(0, 0, 9, 1)).unwrap();
        assert_eq!(m.rates.sensitivity, 0.0);
        assert_eq!(m.rates.specificity, 100.0);
        assert_eq!(format!("{:.2}", m.rates.accuracy), "90.00");
        assert_eq!(m.rates.f1_invasive, 0.0);
        assert_eq!(m.degenerate, vec![Degeneracy::NoPredictedInvasive]);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(metrics_from_confusion(&cm(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn probability_from_logits() {
        assert_eq!(invasive_probability([0.0, 0.0]), 0.5);
        assert!((invasive_probability([0.0, 4f32.ln()]) - 0.8).abs() < 1e-6);
    }

    fn fold_with(correct_invasive: bool) -> FoldResult {
        FoldResult {
            fold_index: 0,
            per_image_probs: BTreeMap::new(),
            per_lesion_prob: BTreeMap::new(),
            per_lesion_pred: BTreeMap::new(),
            lesion_confusion: if correct_invasive { cm(1, 1, 8, 0) } else { cm(0, 1, 8, 1) },
            image_confusion: cm(1, 1, 8, 0),
        }
    }

    #[test]
    fn six_of_eight_folds_give_75_sensitivity() {
        let folds: Vec<FoldResult> = (0..8).map(|i| fold_with(i < 6)).collect();
        let r = aggregate(&folds, meta(BackboneId::Resnet18, Regime::RetrainClassifier)).unwrap();
        assert_eq!(r.mean.sensitivity, 75.0);
        assert!(aggregate(&[], meta(BackboneId::Resnet18, Regime::Scratch)).is_err());
    }

    #[test]
    fn mean_of_one_and_of_identical_folds() {
        let one = aggregate(&[fold_with(true)], meta(BackboneId::Resnet18, Regime::Scratch)).unwrap();
        assert_eq!(one.mean, one.per_fold[0].rates);
        let same: Vec<FoldResult> = (0..8).map(|_| fold_with(true)).collect();
        let all = aggregate(&same, meta(BackboneId::Resnet18, Regime::Scratch)).unwrap();
        for (a, b) in all.mean.fields().iter().zip(one.mean.fields()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn injected(backbone: BackboneId, regime: Regime, v: [f64; 4]) -> MetricsReport {
        let rates = Rates {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            f1_invasive: 0.0,
            f1_macro: v[3],
        };
        MetricsReport {
            per_fold: vec![],
            mean: rates,
            image_mean: rates,
            meta: meta(backbone, regime),
        }
    }

    #[test]
    fn table_rows_are_character_exact() {
        let r = injected(
            BackboneId::SeResnext50,
            Regime::RetrainClassifier,
            [82.76, 75.00, 84.95, 81.98],
        );
        let text = render_report(&[r], &[ReferenceRow::human_rater()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER);
        assert_eq!(lines[1], "SE-Resnext50 RC  82.76  75.00  84.95  81.98");
        assert_eq!(lines[2], "Human Rater  -  81.50  72.50  -");
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(render_report(&[], &[]), format!("{TABLE_HEADER}\n"));
    }

    #[test]
    fn failed_cells_are_marked() {
        let rows = vec![TableRow::Failed {
            label: "Resnet18 FT".into(),
            reason: "pretrained weights unavailable".into(),
        }];
        assert!(render_table(&rows, F1Column::Macro).contains("Resnet18 FT  failed"));
        assert!(report_json(&rows).contains("pretrained weights unavailable"));
    }
}
