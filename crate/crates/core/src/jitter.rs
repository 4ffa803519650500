//! Box-expansion robustness study: ground-truth boxes are grown by `k`
//! pixels on every side, the segmenter is re-prompted, and the Dice
//! distribution is reported per `k`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_boxes, load_mask, open_image, BBox, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_quad, summarize_with, StdKind, SummaryStats};
use crate::segmenter::{encode_image, segment_boxes, DecodeSettings, EmbeddingCache, SegmenterBackend};

/// Offsets in pixels; the first one is the tight-box baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct JitterSpec {
    offsets: Vec<u32>,
}

impl JitterSpec {
    pub fn new(offsets: Vec<u32>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(Error::config("jitter offsets must start at 0"));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "jitter offsets must be strictly increasing: {offsets:?}"
            )));
        }
        Ok(JitterSpec { offsets })
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            offsets: vec![0, 5, 10, 15, 20],
        }
    }
}

impl TryFrom<Vec<u32>> for JitterSpec {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        JitterSpec::new(v)
    }
}

impl From<JitterSpec> for Vec<u32> {
    fn from(s: JitterSpec) -> Self {
        s.offsets
    }
}

/// Grows `bbox` by `k` on all four sides, clipped to `bounds = (width, height)`.
pub fn expand_box(bbox: &BBox, k: u32, bounds: (usize, usize)) -> BBox {
    let k = k as f64;
    BBox {
        x0: bbox.x0 - k,
        y0: bbox.y0 - k,
        x1: bbox.x1 + k,
        y1: bbox.y1 + k,
    }
    .clip(bounds.0 as f64, bounds.1 as f64)
}

/// One Dice value per (sample, offset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterRow {
    pub sample_id: String,
    pub offset: u32,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetDistribution {
    pub offset: u32,
    pub dice: Vec<f64>,
    pub summary: SummaryStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterResult {
    pub sample_ids: Vec<String>,
    pub per_offset: Vec<OffsetDistribution>,
}

impl JitterResult {
    /// Rows in `(sample_id, offset)` order.
    pub fn rows(&self) -> Vec<JitterRow> {
        let mut rows = Vec::new();
        for (i, id) in self.sample_ids.iter().enumerate() {
            for d in &self.per_offset {
                rows.push(JitterRow {
                    sample_id: id.clone(),
                    offset: d.offset,
                    dice: d.dice[i],
                });
            }
        }
        rows
    }
}

/// Rows computed before a backend error stopped the study.
#[derive(Debug)]
pub struct PartialJitter {
    pub completed: Vec<JitterRow>,
    pub error: Error,
}

/// Dice for every offset on one sample.
pub fn jitter_sample(
    seg: &mut dyn SegmenterBackend,
    cache: &mut EmbeddingCache,
    entry: &ManifestEntry,
    spec: &JitterSpec,
    min_area: usize,
    settings: &DecodeSettings,
) -> Result<Vec<f64>> {
    let gt = load_mask(&entry.mask_path)?;
    let image = open_image(&entry.image_path)?;
    let dims = (image.width() as usize, image.height() as usize);
    if dims != gt.dims() {
        return Err(Error::data(format!(
            "sample {:?}: image is {}x{} but mask is {}x{}",
            entry.sample_id,
            dims.0,
            dims.1,
            gt.width(),
            gt.height()
        )));
    }
    let tight = derive_boxes(&gt, min_area);
    let emb = if tight.is_empty() {
        None
    } else {
        Some(encode_image(seg, cache, &entry.sample_id, &image)?)
    };
    spec.offsets()
        .iter()
        .map(|&k| {
            let pred = match &emb {
                Some(emb) => {
                    let boxes: Vec<BBox> = tight.iter().map(|b| expand_box(b, k, dims)).collect();
                    segment_boxes(seg, emb, &boxes, dims, settings)?
                }
                None => crate::dataset::BinaryMask::empty(dims.0, dims.1),
            };
            Ok(compute_quad(&pred, &gt)?.dice)
        })
        .collect()
}

/// Runs the study over the eval split. `make_backend` is called once per
/// worker thread; results are merged in sample order.
pub fn run_jitter_study<F>(
    manifest: &DatasetManifest,
    make_backend: F,
    spec: &JitterSpec,
    min_area: usize,
    settings: &DecodeSettings,
    std_kind: StdKind,
) -> std::result::Result<JitterResult, PartialJitter>
where
    F: Fn() -> Result<Box<dyn SegmenterBackend>> + Sync,
{
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Eval).collect();
    if entries.is_empty() {
        return Err(PartialJitter {
            completed: Vec::new(),
            error: Error::data("empty evaluation split"),
        });
    }
    let make_backend = &make_backend;
    let outcomes: Vec<Result<Vec<f64>>> = entries
        .par_iter()
        .map_init(
            || make_backend().map(|b| (b, EmbeddingCache::default())),
            |session, entry| match session {
                Ok((backend, cache)) => jitter_sample(backend.as_mut(), cache, entry, spec, min_area, settings),
                Err(e) => Err(Error::Backend(format!("could not create segmenter session: {e}"))),
            },
        )
        .collect();

    let mut per_sample: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut completed = Vec::new();
    let mut first_error = None;
    for (entry, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(dice) => {
                for (&offset, &d) in spec.offsets().iter().zip(&dice) {
                    completed.push(JitterRow {
                        sample_id: entry.sample_id.clone(),
                        offset,
                        dice: d,
                    });
                }
                per_sample.insert(&entry.sample_id, dice);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(error) = first_error {
        return Err(PartialJitter { completed, error });
    }

    let sample_ids: Vec<String> = per_sample.keys().map(|s| s.to_string()).collect();
    let per_offset = spec
        .offsets()
        .iter()
        .enumerate()
        .map(|(i, &offset)| {
            let dice: Vec<f64> = per_sample.values().map(|v| v[i]).collect();
            let summary = summarize_with(&dice, std_kind).map_err(|error| PartialJitter {
                completed: Vec::new(),
                error,
            })?;
            Ok(OffsetDistribution { offset, dice, summary })
        })
        .collect::<std::result::Result<Vec<_>, PartialJitter>>()?;
    Ok(JitterResult { sample_ids, per_offset })
}
