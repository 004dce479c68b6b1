//! Lesion/image data model and the CSV manifest that indexes a dataset.
//!
//! A manifest has one row per image:
//!
//! ```text
//! lesion_id,label,image_path,site
//! L001,benign,images/L001_0.png,floor of mouth
//! L001,benign,images/L001_1.png,floor of mouth
//! ```
//!
//! Rows of one lesion are contiguous. Image paths are relative to the
//! manifest's directory; the image id is the file stem.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging;

pub const MANIFEST_HEADER: [&str; 4] = ["lesion_id", "label", "image_path", "site"];

/// Binary lesion label. `Invasive` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionLabel {
    Benign,
    Invasive,
}

impl LesionLabel {
    pub const ALL: [LesionLabel; 2] = [LesionLabel::Benign, LesionLabel::Invasive];

    /// Class index used for logits: benign 0, invasive 1.
    pub fn index(self) -> usize {
        match self {
            LesionLabel::Benign => 0,
            LesionLabel::Invasive => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(LesionLabel::Benign),
            1 => Some(LesionLabel::Invasive),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            LesionLabel::Benign => LesionLabel::Invasive,
            LesionLabel::Invasive => LesionLabel::Benign,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionLabel::Benign => "benign",
            LesionLabel::Invasive => "invasive",
        }
    }
}

impl fmt::Display for LesionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benign" => Ok(LesionLabel::Benign),
            "invasive" => Ok(LesionLabel::Invasive),
            other => Err(format!("unknown label token {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub height_px: usize,
    pub width_px: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub label: LesionLabel,
    pub images: Vec<ImageRef>,
    pub site: Option<String>,
}

/// Lesion tally per label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub benign: usize,
    pub invasive: usize,
}

impl LabelCounts {
    pub fn new(benign: usize, invasive: usize) -> Self {
        Self { benign, invasive }
    }

    pub fn get(&self, label: LesionLabel) -> usize {
        match label {
            LesionLabel::Benign => self.benign,
            LesionLabel::Invasive => self.invasive,
        }
    }

    pub fn add(&mut self, label: LesionLabel, n: usize) {
        match label {
            LesionLabel::Benign => self.benign += n,
            LesionLabel::Invasive => self.invasive += n,
        }
    }

    pub fn total(&self) -> usize {
        self.benign + self.invasive
    }
}

/// Validated, immutable dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    root_dir: PathBuf,
    lesions: Vec<LesionRecord>,
    counts: LabelCounts,
}

impl DatasetManifest {
    /// Validates id uniqueness and non-empty lesions; does not touch the filesystem.
    pub fn new(root_dir: impl Into<PathBuf>, lesions: Vec<LesionRecord>) -> Result<Self> {
        let mut lesion_ids = HashSet::new();
        let mut image_ids = HashSet::new();
        let mut counts = LabelCounts::default();
        for (i, lesion) in lesions.iter().enumerate() {
            let invalid = |message: String| Error::InvalidParams(format!("lesion {i}: {message}"));
            if !lesion_ids.insert(lesion.lesion_id.as_str()) {
                return Err(invalid(format!(
                    "duplicate lesion_id {:?}",
                    lesion.lesion_id
                )));
            }
            if lesion.images.is_empty() {
                return Err(invalid(format!("lesion {:?} has no images", lesion.lesion_id)));
            }
            for img in &lesion.images {
                if !image_ids.insert(img.image_id.as_str()) {
                    return Err(invalid(format!("duplicate image_id {:?}", img.image_id)));
                }
                if img.height_px == 0 || img.width_px == 0 {
                    return Err(invalid(format!("image {:?} has zero size", img.image_id)));
                }
            }
            counts.add(lesion.label, 1);
        }
        Ok(Self {
            root_dir: root_dir.into(),
            lesions,
            counts,
        })
    }

    pub fn root_dir(&self) -> &Path {
        &self.root_dir
    }

    pub fn lesions(&self) -> &[LesionRecord] {
        &self.lesions
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    pub fn lesion(&self, lesion_id: &str) -> Option<&LesionRecord> {
        self.lesions.iter().find(|l| l.lesion_id == lesion_id)
    }

    pub fn image_count(&self) -> usize {
        self.lesions.iter().map(|l| l.images.len()).sum()
    }

    /// Absolute (root-joined) location of an image.
    pub fn resolve(&self, image: &ImageRef) -> PathBuf {
        self.root_dir.join(&image.path)
    }

    /// Manifest-order index of every image id; stable per manifest.
    pub fn image_indices(&self) -> BTreeMap<&str, usize> {
        self.lesions
            .iter()
            .flat_map(|l| l.images.iter())
            .enumerate()
            .map(|(i, img)| (img.image_id.as_str(), i))
            .collect()
    }

    /// Errors unless both labels are present, as training requires.
    pub fn require_both_labels(&self) -> Result<()> {
        for label in LesionLabel::ALL {
            if self.counts.get(label) == 0 {
                return Err(Error::InvalidParams(format!(
                    "dataset has no {label} lesions"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    lesion_id: String,
    label: String,
    image_path: String,
    site: String,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    let header = reader.headers().map_err(|e| Error::Manifest {
        row: 1,
        message: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Manifest {
            row: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut lesions: Vec<LesionRecord> = Vec::new();
    let mut seen_lesions = HashSet::new();
    let mut seen_images = HashSet::new();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = i + 2;
        let bad = |message: String| Error::Manifest { row, message };
        let r = record.map_err(|e| bad(e.to_string()))?;
        let lesion_id = r.lesion_id.trim().to_string();
        if lesion_id.is_empty() {
            return Err(bad("empty lesion_id".into()));
        }
        let label: LesionLabel = r.label.trim().parse().map_err(bad)?;
        let rel = PathBuf::from(r.image_path.trim());
        let image_id = rel
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad(format!("image_path {:?} has no file name", r.image_path)))?
            .to_string();
        let site = Some(r.site.trim().to_string()).filter(|s| !s.is_empty());

        let abs = root_dir.join(&rel);
        if !abs.is_file() {
            return Err(bad(format!("dangling image path {}", abs.display())));
        }
        let (height_px, width_px) =
            imaging::png_dimensions(&abs).map_err(|e| bad(e.to_string()))?;

        if !seen_images.insert(image_id.clone()) {
            return Err(bad(format!("duplicate image_id {image_id:?}")));
        }
        let image = ImageRef {
            image_id,
            path: rel,
            height_px,
            width_px,
        };
        match lesions.last_mut() {
            Some(current) if current.lesion_id == lesion_id => {
                if current.label != label {
                    return Err(bad(format!(
                        "duplicate lesion_id {lesion_id:?} with conflicting label {label} (was {})",
                        current.label
                    )));
                }
                current.images.push(image);
            }
            _ => {
                if !seen_lesions.insert(lesion_id.clone()) {
                    return Err(bad(format!(
                        "duplicate lesion_id {lesion_id:?} (rows of a lesion must be contiguous)"
                    )));
                }
                lesions.push(LesionRecord {
                    lesion_id,
                    label,
                    images: vec![image],
                    site,
                });
            }
        }
    }
    DatasetManifest::new(root_dir, lesions)
}

/// Writes `manifest` to `path`. Image paths stay relative when `path` lives in
/// the manifest's root directory and become absolute otherwise.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let target_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let same_root = same_dir(target_dir, manifest.root_dir());

    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for lesion in manifest.lesions() {
        for img in &lesion.images {
            let p = if same_root {
                img.path.clone()
            } else {
                manifest.resolve(img)
            };
            writer
                .write_record([
                    lesion.lesion_id.as_str(),
                    lesion.label.as_str(),
                    &p.to_string_lossy(),
                    lesion.site.as_deref().unwrap_or(""),
                ])
                .map_err(csv_err)?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
    };
    norm(a) == norm(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(dir: &Path, rel: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        imaging::write_gray_png(&p, 3, 4, &[0u8; 12]).unwrap();
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        fs::write(&p, format!("lesion_id,label,image_path,site\n{body}")).unwrap();
        p
    }

    #[test]
    fn single_benign_lesion() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let m = load_manifest(&write_manifest(dir.path(), "L1,benign,a.png,\n")).unwrap();
        assert_eq!(m.counts(), LabelCounts::new(1, 0));
        let img = &m.lesions()[0].images[0];
        assert_eq!((img.image_id.as_str(), img.height_px, img.width_px), ("a", 3, 4));
        assert_eq!(m.lesions()[0].site, None);
        assert!(m.require_both_labels().is_err());
    }

    #[test]
    fn duplicate_lesion_with_other_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        let p = write_manifest(
            dir.path(),
            "L007,benign,a.png,\nL007,invasive,b.png,\n",
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { row: 3, .. }), "{err}");
        assert!(err.to_string().contains("L007"));
    }

    #[test]
    fn non_contiguous_lesion_rows_are_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png", "c.png"] {
            write_png(dir.path(), f);
        }
        let p = write_manifest(
            dir.path(),
            "L1,benign,a.png,\nL2,benign,b.png,\nL1,benign,c.png,\n",
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { row: 4, .. }), "{err}");
    }

    #[test]
    fn row_level_errors_carry_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let cases = [
            ("L1,benign,a.png,\nL2,malignant,a.png,\n", 3, "unknown label"),
            ("L1,benign,missing.png,\n", 2, "dangling"),
            ("L1,benign,a.png,\nL2,benign,a.png,\n", 3, "duplicate image_id"),
            ("L1,benign,a.png\n", 2, ""),
        ];
        for (body, want_row, needle) in cases {
            let err = load_manifest(&write_manifest(dir.path(), body)).unwrap_err();
            match &err {
                Error::Manifest { row, message } => {
                    assert_eq!(*row, want_row, "{body:?}: {err}");
                    assert!(message.contains(needle), "{body:?}: {err}");
                }
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn wrong_header_is_row_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "id,label,path,site\n").unwrap();
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            Error::Manifest { row: 1, .. }
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_manifest(Path::new("/nonexistent/manifest.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn empty_manifest_round_trips_as_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(dir.path(), vec![]).unwrap();
        let p = dir.path().join("manifest.csv");
        save_manifest(&m, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "lesion_id,label,image_path,site\n");
        let back = load_manifest(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.counts().total(), 0);
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "img/x_0.png");
        write_png(dir.path(), "img/x_1.png");
        write_png(dir.path(), "img/y_0.png");
        let p = write_manifest(
            dir.path(),
            "x,invasive,img/x_0.png,\"tongue, left\"\nx,invasive,img/x_1.png,\"tongue, left\"\ny,benign,img/y_0.png,\n",
        );
        let m = load_manifest(&p).unwrap();
        let p2 = dir.path().join("copy.csv");
        save_manifest(&m, &p2).unwrap();
        assert_eq!(load_manifest(&p2).unwrap(), m);
        assert_eq!(m.lesions()[0].site.as_deref(), Some("tongue, left"));
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let m = DatasetManifest::new(".", vec![]).unwrap();
        let err = save_manifest(&m, Path::new("/proc/definitely/not/here.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
