//! Config-driven runs: all folds of one (backbone, regime) cell, matrices of
//! cells, and report assembly. Everything a run writes lives under its
//! `output_dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{ClassWeightSetting, RunConfig, RunMatrix};
use crate::dataset::{load_manifest, DatasetManifest, LabelCounts};
use crate::error::{Error, Result};
use crate::evaluator::{
    aggregate, evaluate_fold, render_table, report_json, F1Column, FoldResult, MetricsReport,
    ReferenceRow, ReportMeta, TableRow,
};
use crate::modelkit::checkpoint::Checkpoint;
use crate::modelkit::{build_model, fetch};
use crate::pipeline::dataset_stats;
use crate::splits::{make_splits_with_folds, verify_plan, Fold, SplitPlan};
use crate::trainer::{class_weights, train_fold, DiskStore, ImageStore, Loader};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const TABLE_JSON_FILE: &str = "table.json";
pub const RESULT_FILE: &str = "result.json";
pub const HISTORY_FILE: &str = "history.json";
pub const MODEL_FILE: &str = "model.safetensors";
pub const NONFINITE_FILE: &str = "nonfinite.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunStamp {
    config_digest: String,
    global_seed: u64,
}

/// A fold's result as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub config_digest: String,
    pub global_seed: u64,
    pub class_weights: [f64; 2],
    #[serde(flatten)]
    pub result: FoldResult,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    config_digest: &'a str,
    fold_index: usize,
    epoch: usize,
    step: usize,
    batch_lesion_ids: &'a [String],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub table: String,
    /// Folds trained by this call; the others were resumed from disk.
    pub trained_folds: Vec<usize>,
}

pub fn fold_dir(output_dir: &Path, fold_index: usize) -> PathBuf {
    output_dir.join("folds").join(format!("fold_{fold_index}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates or reopens a run directory, refusing one made by another config.
fn claim_run_dir(cfg: &RunConfig, digest: &str) -> Result<()> {
    let dir = &cfg.output_dir;
    let stamp_path = dir.join(RUN_FILE);
    if stamp_path.is_file() {
        let stamp: RunStamp = read_json(&stamp_path)?;
        if stamp.config_digest != digest {
            return Err(Error::DigestMismatch {
                dir: dir.clone(),
                existing: stamp.config_digest,
                requested: digest.to_string(),
            });
        }
        return Ok(());
    }
    create_dir(dir)?;
    write_json(
        &stamp_path,
        &RunStamp {
            config_digest: digest.to_string(),
            global_seed: cfg.global_seed,
        },
    )?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

/// Split plan for `cfg`, checked against the manifest.
pub fn plan_for(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<SplitPlan> {
    let s = &cfg.split;
    let plan = make_splits_with_folds(manifest, s.rare_label, s.n_val_common, s.seed, s.folds)?;
    let problems = verify_plan(&plan, manifest);
    if !problems.is_empty() {
        return Err(Error::Split(problems.join("; ")));
    }
    Ok(plan)
}

fn training_image_counts(manifest: &DatasetManifest, fold: &Fold) -> LabelCounts {
    let mut counts = LabelCounts::default();
    for id in &fold.train {
        if let Some(l) = manifest.lesion(id) {
            counts.add(l.label, l.images.len());
        }
    }
    counts
}

/// Trains and evaluates one fold, writing its artifacts.
fn run_fold<S: ImageStore>(
    cfg: &RunConfig,
    digest: &str,
    manifest: &DatasetManifest,
    fold: &Fold,
    pretrained: Option<&Checkpoint>,
    loader: &mut Loader<S>,
) -> Result<FoldRecord> {
    let dir = fold_dir(&cfg.output_dir, fold.fold_index);
    create_dir(&dir)?;
    let weights = match cfg.train.class_weights {
        ClassWeightSetting::Auto => class_weights(training_image_counts(manifest, fold))?,
        ClassWeightSetting::Fixed(w) => w,
    };
    let normalization = if cfg.preprocess.uses_dataset_stats(cfg.regime) {
        let mut images = Vec::new();
        for id in &fold.train {
            let lesion = manifest.lesion(id).expect("plan verified against manifest");
            for image in &lesion.images {
                images.push(loader.store.load(&manifest.resolve(image))?);
            }
        }
        Some(dataset_stats(&images)?)
    } else {
        None
    };
    let pre = cfg.preprocess.spec(normalization);
    let mut model = build_model(
        cfg.model_spec(),
        cfg.regime,
        cfg.train.dropout_p,
        cfg.global_seed,
        pretrained,
    )?;
    let train_cfg = cfg.train.train_config(weights, cfg.global_seed);
    let history = match train_fold(&mut model, manifest, fold, &train_cfg, &pre, &cfg.augment, loader) {
        Ok(h) => h,
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            lesion_ids,
        }) => {
            write_json(
                &dir.join(NONFINITE_FILE),
                &NonFiniteDump {
                    config_digest: digest,
                    fold_index: fold.fold_index,
                    epoch,
                    step,
                    batch_lesion_ids: &lesion_ids,
                },
            )?;
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                lesion_ids,
            });
        }
        Err(e) => return Err(e),
    };
    let result = evaluate_fold(&mut model, manifest, fold, &pre, loader)?;

    let mut extra = BTreeMap::new();
    extra.insert("config_digest".to_string(), digest.to_string());
    extra.insert("fold_index".to_string(), fold.fold_index.to_string());
    model.save(&dir.join(MODEL_FILE), &extra)?;
    history.save(&dir.join(HISTORY_FILE))?;
    let record = FoldRecord {
        config_digest: digest.to_string(),
        global_seed: cfg.global_seed,
        class_weights: weights,
        result,
    };
    // written last: its presence marks the fold complete
    write_json(&dir.join(RESULT_FILE), &record)?;
    Ok(record)
}

fn completed_fold(cfg: &RunConfig, digest: &str, fold_index: usize) -> Option<FoldRecord> {
    let path = fold_dir(&cfg.output_dir, fold_index).join(RESULT_FILE);
    let record: FoldRecord = read_json(&path).ok()?;
    (record.config_digest == digest && record.result.fold_index == fold_index).then_some(record)
}

/// Runs (or resumes) every fold of `cfg` and writes the report.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let digest = cfg.digest();
    let manifest = load_manifest(&cfg.manifest_path)?;
    manifest.require_both_labels()?;
    let plan = plan_for(cfg, &manifest)?;
    claim_run_dir(cfg, &digest)?;
    plan.save(&cfg.output_dir.join(PLAN_FILE))?;

    let mut pretrained = None;
    let mut loader = Loader::new(DiskStore::new(), cfg.regime.backbone_frozen());
    let mut results = Vec::with_capacity(plan.folds.len());
    let mut trained_folds = Vec::new();
    for fold in &plan.folds {
        if let Some(done) = completed_fold(cfg, &digest, fold.fold_index) {
            results.push(done.result);
            continue;
        }
        if pretrained.is_none() && cfg.regime.needs_pretrained() {
            pretrained = Some(fetch::load_pretrained(&cfg.model_spec(), cfg.checkpoint.as_deref())?);
        }
        let record = run_fold(cfg, &digest, &manifest, fold, pretrained.as_ref(), &mut loader)?;
        results.push(record.result);
        trained_folds.push(fold.fold_index);
    }

    let meta = ReportMeta {
        backbone: cfg.backbone,
        regime: cfg.regime,
        profile: cfg.profile.as_str().to_string(),
        global_seed: cfg.global_seed,
        split_seed: cfg.split.seed,
        config_digest: digest,
    };
    let report = aggregate(&results, meta)?;
    let rows = [TableRow::Result(report.clone())];
    let table = render_table(&rows, F1Column::Macro);
    write_json(&cfg.output_dir.join(REPORT_FILE), &report)?;
    write_text(&cfg.output_dir.join(TABLE_FILE), &table)?;
    write_text(&cfg.output_dir.join(TABLE_JSON_FILE), &report_json(&rows))?;
    Ok(RunOutcome {
        report,
        table,
        trained_folds,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOutcome {
    pub rows: Vec<TableRow>,
    pub table: String,
}

impl MatrixOutcome {
    pub fn failed(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r, TableRow::Failed { .. }))
            .count()
    }
}

/// Runs every cell of `matrix` in table order. A failing cell is recorded and
/// marked in the table; the remaining cells still run. Configuration errors
/// are reported before any training.
pub fn cmd_matrix(matrix: &RunMatrix) -> Result<MatrixOutcome> {
    let cells = matrix.cells()?;
    let mut rows = Vec::with_capacity(cells.len() + 1);
    for cell in &cells {
        rows.push(match cmd_run(cell) {
            Ok(outcome) => TableRow::Result(outcome.report),
            Err(e) => TableRow::Failed {
                label: cell.label(),
                reason: e.to_string(),
            },
        });
    }
    if matrix.human_reference {
        rows.push(TableRow::Reference(ReferenceRow::human_rater()));
    }
    let table = render_table(&rows, F1Column::Macro);
    let dir = &matrix.shared.output_dir;
    create_dir(dir)?;
    write_text(&dir.join(TABLE_FILE), &table)?;
    write_text(&dir.join(TABLE_JSON_FILE), &report_json(&rows))?;
    Ok(MatrixOutcome { rows, table })
}

/// Combined table from finished run directories.
pub fn cmd_report(run_dirs: &[PathBuf], human_reference: bool, f1: F1Column) -> Result<(String, String)> {
    let mut rows = Vec::with_capacity(run_dirs.len() + 1);
    for dir in run_dirs {
        rows.push(TableRow::Result(read_json(&dir.join(REPORT_FILE))?));
    }
    if human_reference {
        rows.push(TableRow::Reference(ReferenceRow::human_rater()));
    }
    Ok((render_table(&rows, f1), report_json(&rows)))
}
