//! JSON-lines manifests and in-memory datasets.
//!
//! Paths in a manifest are relative to the manifest's directory. Anything
//! under a directory named [`SEALED_DIR`] is off limits to loading.

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{load_mask_png, load_png};
use crate::tensor::{BinaryMask, Image};

pub const SEALED_DIR: &str = "sealed";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub id: String,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn is_sealed(path: &Path) -> bool {
    path.components().any(|c| matches!(c, Component::Normal(s) if s == SEALED_DIR))
}

fn refuse_sealed(path: &Path) -> Result<()> {
    if is_sealed(path) {
        return Err(Error::invalid("manifest", format!("{} is inside a sealed directory", path.display())));
    }
    Ok(())
}

/// Reads a manifest and resolves its paths. Sealed paths are rejected.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    refuse_sealed(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut e: ManifestEntry =
            serde_json::from_str(line).map_err(|err| Error::format(path, format!("line {}: {err}", n + 1)))?;
        e.image = base.join(&e.image);
        e.mask = e.mask.map(|m| base.join(m));
        refuse_sealed(&e.image)?;
        if let Some(m) = &e.mask {
            refuse_sealed(m)?;
        }
        entries.push(e);
    }
    Ok(entries)
}

/// SHA-256 over the given files and every file their manifests reference,
/// each prefixed by its length. Paths themselves are not hashed.
pub fn hash_inputs(files: &[&Path], manifests: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    let mut feed = |path: &Path| -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    for f in files {
        feed(f)?;
    }
    for m in manifests {
        feed(m)?;
        for e in read_manifest(m)? {
            feed(&e.image)?;
            if let Some(mask) = &e.mask {
                feed(mask)?;
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub masks: Vec<BinaryMask>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pairs(&self) -> Vec<(&Image, &BinaryMask)> {
        self.images.iter().zip(&self.masks).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

pub fn load_labeled(entries: &[ManifestEntry]) -> Result<LabeledSet> {
    let loaded: Vec<(Image, BinaryMask)> = entries
        .par_iter()
        .map(|e| {
            let mask_path =
                e.mask.as_ref().ok_or_else(|| Error::invalid("manifest", format!("entry `{}` has no mask", e.id)))?;
            let image = load_png(&e.image)?;
            let mask = load_mask_png(mask_path)?;
            if !image.same_dims(&mask) {
                return Err(Error::Shape(format!("entry `{}`: image and mask dims differ", e.id)));
            }
            Ok((image, mask))
        })
        .collect::<Result<_>>()?;
    let (images, masks) = loaded.into_iter().unzip();
    Ok(LabeledSet { ids: entries.iter().map(|e| e.id.clone()).collect(), images, masks })
}

/// Unlabeled images; masks listed in the manifest are ignored.
pub fn load_unlabeled(entries: &[ManifestEntry]) -> Result<(Vec<String>, Vec<Image>)> {
    let images = entries.par_iter().map(|e| load_png(&e.image)).collect::<Result<_>>()?;
    Ok((entries.iter().map(|e| e.id.clone()).collect(), images))
}
