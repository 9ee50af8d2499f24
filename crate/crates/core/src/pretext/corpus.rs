//! Corpus assembly and its on-disk form.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! corpus.json        root seed, catalog version, patch size, object paths
//! manifest.jsonl     one record per patch
//! objects/ab/<sha256>.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::manips::CATALOG_VERSION;
use crate::pixel::io::{encode_png, read_png};
use crate::pixel::{stream_id, Image, RngStream};
use crate::pretext::{
    extract_patch_with_rect, generate_procedural, plan_patch, SynthOptions, TAG_CROP, TAG_SOURCE,
    TAG_SPLIT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Procedural,
    Folder,
}

/// Where source images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Number of procedural images; for folders, an upper bound (0 = all).
    pub count: usize,
    #[serde(skip)]
    pub root_seed: u64,
    pub folder_path: Option<PathBuf>,
    /// Procedural source height and width.
    pub height: usize,
    pub width: usize,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            kind: SourceKind::Procedural,
            count: 2000,
            root_seed: 0,
            folder_path: None,
            height: 80,
            width: 104,
        }
    }
}

/// Patch geometry and the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub resize_short: usize,
    pub crop: usize,
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            resize_short: 72,
            crop: 64,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// `[top, left, height, width]` in the resized source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Serialize for CropRect {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.top, self.left, self.height, self.width].serialize(s)
    }
}

impl<'de> Deserialize<'de> for CropRect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [top, left, height, width] = <[usize; 4]>::deserialize(d)?;
        Ok(CropRect {
            top,
            left,
            height,
            width,
        })
    }
}

/// One manifest record. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patch_id: u64,
    pub source_ref: String,
    pub crop_rect: CropRect,
    /// Classes drawn for this patch in epoch 0.
    pub ops_applied: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub root_seed: u64,
    pub catalog_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPatch {
    pub patch_id: u64,
    pub image: Image,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub patches: Vec<CorpusPatch>,
    pub manifest: Manifest,
    pub patch_size: usize,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusPatch> {
        self.patches.iter().filter(move |p| p.split == split)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusIndex {
    root_seed: u64,
    catalog_version: String,
    patch_size: usize,
    objects: Vec<ObjectRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRef {
    patch_id: u64,
    path: String,
}

fn list_folder(dir: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if limit > 0 {
        files.truncate(limit);
    }
    Ok(files)
}

/// Build the clean patch corpus. Every patch is stored at 8-bit precision
/// so the in-memory corpus equals its PNG round trip.
pub fn build_corpus(
    source: &SourceSpec,
    cfg: &CorpusConfig,
    synth: &SynthOptions,
) -> Result<Corpus> {
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(invalid!("val_fraction must be in [0, 1), got {}", cfg.val_fraction));
    }
    let seed = source.root_seed;
    let sources: Vec<String> = match source.kind {
        SourceKind::Procedural => {
            if source.count == 0 {
                return Err(invalid!("procedural source needs count >= 1"));
            }
            (0..source.count).map(|i| format!("procedural:{i}")).collect()
        }
        SourceKind::Folder => {
            let dir = source
                .folder_path
                .as_deref()
                .ok_or_else(|| invalid!("folder source needs folder_path"))?;
            let files = list_folder(dir, source.count)?;
            if files.is_empty() {
                return Err(invalid!("no PNG images in {}", dir.display()));
            }
            files
                .iter()
                .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
                .collect()
        }
    };

    let built: Vec<Result<(CorpusPatch, ManifestEntry)>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, source_ref)| {
            let patch_id = i as u64;
            let img = match source.kind {
                SourceKind::Procedural => {
                    let mut rng = RngStream::derive(seed, stream_id(&[TAG_SOURCE, patch_id]));
                    generate_procedural(&mut rng, source.height, source.width)?
                }
                SourceKind::Folder => {
                    let img = read_png(&source.folder_path.as_ref().unwrap().join(source_ref))?;
                    if img.channels() == 1 {
                        Image::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))?
                    } else {
                        img
                    }
                }
            };
            let mut crop_rng = RngStream::derive(seed, stream_id(&[TAG_CROP, patch_id]));
            let (patch, crop_rect) =
                extract_patch_with_rect(&img, &mut crop_rng, cfg.resize_short, cfg.crop)?;
            let split = if RngStream::derive(seed, stream_id(&[TAG_SPLIT, patch_id]))
                .chance(cfg.val_fraction)
            {
                Split::Val
            } else {
                Split::Train
            };
            let ops_applied = plan_patch(patch_id, synth)?.class_indices();
            Ok((
                CorpusPatch {
                    patch_id,
                    image: patch.quantize_8bit(),
                    split,
                },
                ManifestEntry {
                    patch_id,
                    source_ref: source_ref.clone(),
                    crop_rect,
                    ops_applied,
                    split,
                },
            ))
        })
        .collect();

    let mut patches = Vec::with_capacity(built.len());
    let mut entries = Vec::with_capacity(built.len());
    for b in built {
        let (p, e) = b?;
        patches.push(p);
        entries.push(e);
    }
    Ok(Corpus {
        patches,
        manifest: Manifest {
            entries,
            root_seed: seed,
            catalog_version: CATALOG_VERSION.to_string(),
        },
        patch_size: cfg.crop,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write the corpus under `dir`. Output bytes depend only on the corpus.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let encoded: Vec<Result<(u64, String, Vec<u8>)>> = corpus
        .patches
        .par_iter()
        .map(|p| {
            let bytes = encode_png(&p.image)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            Ok((p.patch_id, format!("objects/{}/{}.png", &digest[..2], digest), bytes))
        })
        .collect();
    let mut objects = Vec::with_capacity(encoded.len());
    for e in encoded {
        let (patch_id, rel, bytes) = e?;
        write_file(&dir.join(&rel), &bytes)?;
        objects.push(ObjectRef {
            patch_id,
            path: rel,
        });
    }
    let mut manifest = String::new();
    for entry in &corpus.manifest.entries {
        manifest.push_str(&serde_json::to_string(entry)?);
        manifest.push('\n');
    }
    write_file(&dir.join("manifest.jsonl"), manifest.as_bytes())?;
    let index = CorpusIndex {
        root_seed: corpus.manifest.root_seed,
        catalog_version: corpus.manifest.catalog_version.clone(),
        patch_size: corpus.patch_size,
        objects,
    };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    write_file(&dir.join("corpus.json"), json.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(entries)
}

/// Load a corpus written by [`write_corpus`], verifying object digests and
/// the catalog version.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let index_path = dir.join("corpus.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
    if index.catalog_version != CATALOG_VERSION {
        return Err(Error::Format(format!(
            "corpus built with catalog {}, this build uses {}",
            index.catalog_version, CATALOG_VERSION
        )));
    }
    let entries = read_manifest(&dir.join("manifest.jsonl"))?;
    if entries.len() != index.objects.len() {
        return Err(Error::Format(format!(
            "manifest has {} entries but index lists {} objects",
            entries.len(),
            index.objects.len()
        )));
    }
    let patches: Vec<Result<CorpusPatch>> = entries
        .par_iter()
        .zip(index.objects.par_iter())
        .map(|(entry, obj)| {
            if entry.patch_id != obj.patch_id {
                return Err(Error::Format(format!(
                    "patch id mismatch: manifest {} vs index {}",
                    entry.patch_id, obj.patch_id
                )));
            }
            let path = dir.join(&obj.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if !obj.path.contains(&digest) {
                return Err(Error::Format(format!("{} fails its digest check", obj.path)));
            }
            let image = read_png(&path)?;
            if image.dims() != (index.patch_size, index.patch_size, 3) {
                return Err(Error::Format(format!(
                    "{} has shape {:?}, expected {}x{}x3",
                    obj.path,
                    image.dims(),
                    index.patch_size,
                    index.patch_size
                )));
            }
            Ok(CorpusPatch {
                patch_id: entry.patch_id,
                image,
                split: entry.split,
            })
        })
        .collect();
    Ok(Corpus {
        patches: patches.into_iter().collect::<Result<_>>()?,
        manifest: Manifest {
            entries,
            root_seed: index.root_seed,
            catalog_version: index.catalog_version,
        },
        patch_size: index.patch_size,
    })
}
