//! Locating, downloading and integrity-checking pretrained checkpoints.
//!
//! Checkpoints live in a cache directory named by `LESIONLAB_CHECKPOINT_DIR`
//! as `<backbone>-<profile>.safetensors`. A `.sha256` sidecar, written on
//! download, is verified on every load.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::checkpoint::{file_sha256, Checkpoint};
use super::{BackboneId, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_DIR_ENV: &str = "LESIONLAB_CHECKPOINT_DIR";

/// Published ImageNet weights (timm exports, torchvision-compatible names).
pub fn default_url(backbone: BackboneId) -> &'static str {
    match backbone {
        BackboneId::Resnet18 => {
            "https://huggingface.co/timm/resnet18.tv_in1k/resolve/main/model.safetensors"
        }
        BackboneId::Densenet121 => {
            "https://huggingface.co/timm/densenet121.tv_in1k/resolve/main/model.safetensors"
        }
        BackboneId::SeResnext50 => {
            "https://huggingface.co/timm/seresnext50_32x4d.racm_in1k/resolve/main/model.safetensors"
        }
    }
}

pub fn checkpoint_dir() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Errors unless the file's sha256 equals `expected` (hex, case-insensitive).
pub fn verify(path: &Path, expected: &str) -> Result<()> {
    let actual = file_sha256(path)?;
    if !actual.eq_ignore_ascii_case(expected.trim()) {
        return Err(Error::Checkpoint(format!(
            "{}: sha256 {actual} does not match expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

/// Downloads `url` to `dest`, checking `expected_sha256` when given, and
/// records the digest in a sidecar. Returns the digest.
pub fn fetch(url: &str, dest: &Path, expected_sha256: Option<&str>) -> Result<String> {
    let response = ureq::get(url)
        .call()
        .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    let mut reader = response.into_body().into_reader();
    let tmp = dest.with_extension("partial");
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        file.write_all(&buf[..n]).map_err(|e| Error::io(&tmp, e))?;
    }
    drop(file);
    let digest = hex::encode(hasher.finalize());
    if let Some(expected) = expected_sha256 {
        if !digest.eq_ignore_ascii_case(expected.trim()) {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::Fetch(format!(
                "{url}: sha256 {digest} does not match expected {expected}"
            )));
        }
    }
    // must parse as a checkpoint before it is installed
    Checkpoint::read(&tmp)?;
    std::fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))?;
    let sc = sidecar(dest);
    std::fs::write(&sc, format!("{digest}\n")).map_err(|e| Error::io(&sc, e))?;
    Ok(digest)
}

/// Path the cache would use for `spec`.
pub fn cached_path(spec: &ModelSpec) -> Option<PathBuf> {
    checkpoint_dir().map(|d| d.join(spec.checkpoint_file_name()))
}

/// Loads the pretrained checkpoint for `spec`, from `explicit` if given,
/// otherwise from the cache directory. A digest sidecar, when present, must
/// match.
pub fn load_pretrained(spec: &ModelSpec, explicit: Option<&Path>) -> Result<Checkpoint> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => cached_path(spec).ok_or_else(|| {
            Error::Checkpoint(format!(
                "no pretrained checkpoint for {spec}: set {CHECKPOINT_DIR_ENV} or give a checkpoint path"
            ))
        })?,
    };
    if !path.is_file() {
        return Err(Error::Checkpoint(format!(
            "pretrained weights for {spec} unavailable: {} does not exist",
            path.display()
        )));
    }
    let sc = sidecar(&path);
    if sc.is_file() {
        let expected = std::fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
        verify(&path, &expected)?;
    }
    Checkpoint::read(&path)
}

/// Installs a locally produced checkpoint with its digest sidecar.
pub fn install(ck: &Checkpoint, dest: &Path) -> Result<String> {
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.write(dest)?;
    let digest = file_sha256(dest)?;
    let sc = sidecar(dest);
    std::fs::write(&sc, format!("{digest}\n")).map_err(|e| Error::io(&sc, e))?;
    Ok(digest)
}
