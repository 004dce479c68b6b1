//! Leave-one-rare-lesion-out cross-validation plans.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, LesionLabel};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DEFAULT_VAL_COMMON: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_index: usize,
    pub val_rare: String,
    pub val_common: Vec<String>,
    /// Every other lesion, in manifest order.
    pub train: Vec<String>,
}

impl Fold {
    pub fn validation_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.val_rare.as_str()).chain(self.val_common.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub rare_label: LesionLabel,
    pub n_val_common: usize,
    /// Rare lesions that stay in training in every fold: one by default,
    /// none when the fold count equals the rare-lesion count.
    pub reserved_rare: Vec<String>,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Split(format!("{}: {e}", path.display())))
    }
}

/// `R - 1` folds for `R` rare lesions.
pub fn make_splits(
    manifest: &DatasetManifest,
    rare_label: LesionLabel,
    n_val_common: usize,
    seed: u64,
) -> Result<SplitPlan> {
    make_splits_with_folds(manifest, rare_label, n_val_common, seed, None)
}

/// Like [`make_splits`], with an optional fold count `1..=R`; the rare
/// lesions not validated in any fold become `reserved_rare`.
pub fn make_splits_with_folds(
    manifest: &DatasetManifest,
    rare_label: LesionLabel,
    n_val_common: usize,
    seed: u64,
    folds: Option<usize>,
) -> Result<SplitPlan> {
    let of_label = |label: LesionLabel| -> Vec<String> {
        manifest
            .lesions()
            .iter()
            .filter(|l| l.label == label)
            .map(|l| l.lesion_id.clone())
            .collect()
    };
    let mut rare = of_label(rare_label);
    let mut common = of_label(rare_label.other());
    let r = rare.len();
    if r == 0 {
        return Err(Error::Split(format!("no {rare_label} lesions in the manifest")));
    }
    if r < 2 {
        return Err(Error::Split(format!(
            "cannot construct folds from {r} {rare_label} lesion; need at least 2"
        )));
    }
    if n_val_common == 0 {
        return Err(Error::Split("n_val_common must be positive".into()));
    }
    let k = folds.unwrap_or(r - 1);
    if k == 0 || k > r {
        return Err(Error::Split(format!(
            "fold count {k} outside 1..={r} for {r} {rare_label} lesions"
        )));
    }
    if common.len() < k * n_val_common {
        return Err(Error::Split(format!(
            "{} {} lesions cannot fill {k} disjoint validation sets of {n_val_common}",
            common.len(),
            rare_label.other()
        )));
    }
    rare.shuffle(&mut substream(seed, "split-rare", &[]));
    common.shuffle(&mut substream(seed, "split-common", &[]));

    let reserved_rare = rare[k..].to_vec();
    let folds = (0..k)
        .map(|i| {
            let val_rare = rare[i].clone();
            let val_common = common[i * n_val_common..(i + 1) * n_val_common].to_vec();
            let held: BTreeSet<&str> = std::iter::once(val_rare.as_str())
                .chain(val_common.iter().map(String::as_str))
                .collect();
            let train = manifest
                .lesions()
                .iter()
                .map(|l| l.lesion_id.as_str())
                .filter(|id| !held.contains(id))
                .map(str::to_owned)
                .collect();
            Fold {
                fold_index: i,
                val_rare,
                val_common,
                train,
            }
        })
        .collect();
    Ok(SplitPlan {
        seed,
        rare_label,
        n_val_common,
        reserved_rare,
        folds,
    })
}

/// Every violated invariant of `plan` against `manifest`, as text. Empty
/// when the plan is sound.
pub fn verify_plan(plan: &SplitPlan, manifest: &DatasetManifest) -> Vec<String> {
    let mut out = Vec::new();
    let labels: BTreeMap<&str, LesionLabel> = manifest
        .lesions()
        .iter()
        .map(|l| (l.lesion_id.as_str(), l.label))
        .collect();
    let all: BTreeSet<&str> = labels.keys().copied().collect();
    let rare_all: BTreeSet<&str> = labels
        .iter()
        .filter(|(_, &l)| l == plan.rare_label)
        .map(|(&id, _)| id)
        .collect();
    let expect_label = |out: &mut Vec<String>, fold: usize, id: &str, want: LesionLabel, role: &str| {
        match labels.get(id) {
            None => out.push(format!("fold {fold}: {role} lesion {id} is not in the manifest")),
            Some(&l) if l != want => out.push(format!(
                "fold {fold}: {role} lesion {id} is {l}, expected {want}"
            )),
            _ => {}
        }
    };

    for id in &plan.reserved_rare {
        if !rare_all.contains(id.as_str()) {
            out.push(format!("reserved lesion {id} is not a {} lesion in the manifest", plan.rare_label));
        }
    }
    if plan.folds.len() + plan.reserved_rare.len() != rare_all.len() {
        out.push(format!(
            "{} folds and {} reserved lesions do not account for {} {} lesions",
            plan.folds.len(),
            plan.reserved_rare.len(),
            rare_all.len(),
            plan.rare_label
        ));
    }

    let mut seen_rare: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen_common: BTreeMap<&str, usize> = BTreeMap::new();
    for (pos, fold) in plan.folds.iter().enumerate() {
        let f = fold.fold_index;
        if f != pos {
            out.push(format!("fold at position {pos} has fold_index {f}"));
        }
        expect_label(&mut out, f, &fold.val_rare, plan.rare_label, "validation");
        for id in &fold.val_common {
            expect_label(&mut out, f, id, plan.rare_label.other(), "validation");
        }
        if fold.val_common.len() != plan.n_val_common {
            out.push(format!(
                "fold {f}: {} common validation lesions, expected {}",
                fold.val_common.len(),
                plan.n_val_common
            ));
        }
        let train: BTreeSet<&str> = fold.train.iter().map(String::as_str).collect();
        if train.len() != fold.train.len() {
            out.push(format!("fold {f}: duplicate lesions in train"));
        }
        for id in fold.validation_ids() {
            if train.contains(id) {
                out.push(format!("fold {f}: validation lesion {id} is also in train"));
            }
        }
        let mut covered = train.clone();
        covered.extend(fold.validation_ids());
        if covered != all {
            let missing: Vec<&str> = all.difference(&covered).copied().collect();
            let extra: Vec<&str> = covered.difference(&all).copied().collect();
            out.push(format!(
                "fold {f}: lesion set differs from manifest (missing {missing:?}, unknown {extra:?})"
            ));
        }

        if plan.reserved_rare.contains(&fold.val_rare) {
            out.push(format!("fold {f}: validates reserved lesion {}", fold.val_rare));
        }
        if let Some(prev) = seen_rare.insert(&fold.val_rare, f) {
            out.push(format!(
                "folds {prev} and {f} both validate {}",
                fold.val_rare
            ));
        }
        for id in &fold.val_common {
            if let Some(prev) = seen_common.insert(id, f) {
                out.push(format!(
                    "folds {prev} and {f} share validation lesion {id}: common validation sets must be disjoint"
                ));
            }
        }
    }
    out
}
