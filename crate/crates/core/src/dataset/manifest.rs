use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ultrasound,
    Ct,
    Xray,
    Other,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ultrasound" => Ok(Modality::Ultrasound),
            "ct" => Ok(Modality::Ct),
            "xray" | "x-ray" => Ok(Modality::Xray),
            "other" => Ok(Modality::Other),
            _ => Err(Error::config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    dataset_id: String,
    modality: Modality,
}

/// A set of cross-referenced image/mask pairs, sorted by `sample_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub modality: Modality,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>, modality: Modality, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(pair) = entries.windows(2).find(|p| p[0].sample_id == p[1].sample_id) {
            return Err(Error::data(format!("duplicate sample_id {:?}", pair[0].sample_id)));
        }
        Ok(DatasetManifest {
            dataset_id: dataset_id.into(),
            modality,
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Writes the manifest as JSON Lines: a header object followed by one
    /// object per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = ManifestHeader {
            dataset_id: self.dataset_id.clone(),
            modality: self.modality,
        };
        write_json_line(&mut out, &header, path)?;
        for entry in &self.entries {
            write_json_line(&mut out, entry, path)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest written by [`DatasetManifest::save`]. Relative paths
    /// resolve against the manifest's directory; every referenced file must
    /// exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let json_err = |source| Error::Json {
            path: path.to_path_buf(),
            source,
        };
        let mut lines = BufReader::new(file)
            .lines()
            .map(|l| l.map_err(|e| Error::io(path, e)))
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let header: ManifestHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?).map_err(json_err)?,
            None => return Err(Error::data(format!("{}: empty manifest", path.display()))),
        };
        let mut entries = Vec::new();
        for line in lines {
            let mut entry: ManifestEntry = serde_json::from_str(&line?).map_err(json_err)?;
            entry.image_path = resolve(base, &entry.image_path);
            entry.mask_path = resolve(base, &entry.mask_path);
            for p in [&entry.image_path, &entry.mask_path] {
                if !p.is_file() {
                    return Err(Error::data(format!(
                        "{}: sample {:?} references missing file {}",
                        path.display(),
                        entry.sample_id,
                        p.display()
                    )));
                }
            }
            entries.push(entry);
        }
        DatasetManifest::new(header.dataset_id, header.modality, entries)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn write_json_line<T: Serialize>(out: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Result of pairing two directories: the manifest plus a human-readable
/// warning per orphaned file.
#[derive(Debug)]
pub struct CrossReference {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Pairs images and masks by filename stem. Every entry starts in the eval
/// split; see [`select_training_subset`].
pub fn cross_reference(
    images_dir: &Path,
    masks_dir: &Path,
    dataset_id: &str,
    modality: Modality,
) -> Result<CrossReference> {
    let images = scan_stems(images_dir)?;
    let masks = scan_stems(masks_dir)?;

    let mut warnings = Vec::new();
    for (stem, file) in &images {
        if !masks.contains_key(stem) {
            warnings.push(format!("{} has no matching mask", file.file_name_lossy()));
        }
    }
    for (stem, file) in &masks {
        if !images.contains_key(stem) {
            warnings.push(format!("{} has no matching image", file.file_name_lossy()));
        }
    }

    let entries: Vec<ManifestEntry> = images
        .iter()
        .filter_map(|(stem, image)| {
            masks.get(stem).map(|mask| ManifestEntry {
                sample_id: stem.clone(),
                image_path: image.clone(),
                mask_path: mask.clone(),
                split: Split::Eval,
            })
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::data(format!(
            "no matched pairs between {} and {}",
            images_dir.display(),
            masks_dir.display()
        )));
    }
    Ok(CrossReference {
        manifest: DatasetManifest::new(dataset_id, modality, entries)?,
        warnings,
    })
}

trait FileNameLossy {
    fn file_name_lossy(&self) -> String;
}

impl FileNameLossy for PathBuf {
    fn file_name_lossy(&self) -> String {
        self.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// stem -> absolute path, for image files directly inside `dir`.
fn scan_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let dir = dir.canonicalize().map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeMap::new();
    for item in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = item.map_err(|e| Error::io(&dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if let Some(prev) = stems.insert(stem.clone(), path.clone()) {
            return Err(Error::data(format!(
                "duplicate stem {stem:?} in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(stems)
}

/// Selection key for one sample: first 8 bytes (big-endian) of
/// `sha256("{seed}:{sample_id}")`.
pub fn subset_key(seed: u64, sample_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{sample_id}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Marks exactly `n` entries as train and the rest as eval. The chosen
/// entries are those with the `n` smallest [`subset_key`] values (ties by
/// sample_id), so the split depends only on the sample ids and the seed.
pub fn select_training_subset(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<DatasetManifest> {
    if n > manifest.entries.len() {
        return Err(Error::data(format!(
            "cannot select {n} training samples from {} entries",
            manifest.entries.len()
        )));
    }
    let mut keyed: Vec<(u64, &str)> = manifest
        .entries
        .iter()
        .map(|e| (subset_key(seed, &e.sample_id), e.sample_id.as_str()))
        .collect();
    keyed.sort_unstable();
    let train: HashSet<&str> = keyed.iter().take(n).map(|(_, id)| *id).collect();

    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: if train.contains(e.sample_id.as_str()) {
                Split::Train
            } else {
                Split::Eval
            },
            ..e.clone()
        })
        .collect();
    DatasetManifest::new(manifest.dataset_id.clone(), manifest.modality, entries)
}
