//! Detector inference and post-processing: raw head output to confident,
//! non-overlapping boxes in original-image coordinates.

use std::cmp::Ordering;

use image::DynamicImage;
use ndarray::{Array3, ArrayD, ArrayView4, Ix3};
use serde::{Deserialize, Serialize};

use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::harness::metadata::ModelMetadata;
use crate::preprocess::{detector_input, map_box, Direction, LetterboxTransform};

pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// A loaded detector graph. Sessions are single-caller.
pub trait DetectorBackend: Send {
    fn metadata(&self) -> &ModelMetadata;

    /// Runs the graph on a preprocessed `1 x 3 x S x S` tensor.
    fn infer(&mut self, sample_id: &str, input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>>;
}

/// Raw `1 x (4 + C) x N` detector head output.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetOutput {
    pub num_classes: usize,
    pub tensor: Array3<f32>,
}

impl RawDetOutput {
    /// Wraps a tensor after checking it against the declared
    /// `(classes, anchors)` geometry.
    pub fn new(tensor: ArrayD<f32>, num_classes: usize, anchors: usize) -> Result<Self> {
        let want = [1, 4 + num_classes, anchors];
        if tensor.shape() != want {
            return Err(Error::contract(format!(
                "detector output shape {:?} does not match metadata {want:?}",
                tensor.shape()
            )));
        }
        let tensor = tensor.into_dimensionality::<Ix3>().expect("rank checked above");
        Ok(RawDetOutput { num_classes, tensor })
    }

    pub fn anchors(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Letterboxes and normalizes `image` per the backend's metadata, runs the
/// graph and checks the output against the declared layout.
pub fn run_detector(
    backend: &mut dyn DetectorBackend,
    sample_id: &str,
    image: &DynamicImage,
) -> Result<(RawDetOutput, LetterboxTransform)> {
    let meta = backend.metadata();
    let (classes, anchors) = meta.detector_output_dims()?;
    let (input, t) = detector_input(image, meta.preprocessing()?)?;
    let raw = backend.infer(sample_id, input.view())?;
    Ok((RawDetOutput::new(raw, classes, anchors)?, t))
}

/// Thresholds, converts and maps every column of `raw` back to the original
/// image. Columns that clip to less than one pixel in either dimension are
/// dropped.
pub fn decode_detections(raw: &RawDetOutput, t: &LetterboxTransform, conf_thresh: f64) -> Vec<Detection> {
    let m = &raw.tensor;
    let mut dets = Vec::new();
    for col in 0..raw.anchors() {
        let mut class_id = 0;
        let mut score = f32::NEG_INFINITY;
        for c in 0..raw.num_classes {
            let s = m[[0, 4 + c, col]];
            if s > score {
                score = s;
                class_id = c;
            }
        }
        if !score.is_finite() {
            continue;
        }
        let score = (score as f64).clamp(0.0, 1.0);
        if score < conf_thresh {
            continue;
        }
        let [cx, cy, w, h] = [0, 1, 2, 3].map(|r| m[[0, r, col]] as f64);
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            continue;
        }
        let letterboxed = BBox::from_center(cx, cy, w, h);
        if letterboxed.width() <= 0.0 || letterboxed.height() <= 0.0 {
            continue;
        }
        let Ok(bbox) = map_box(&letterboxed, t, Direction::Inverse) else {
            continue;
        };
        if bbox.width() < 1.0 || bbox.height() < 1.0 {
            continue;
        }
        dets.push(Detection { bbox, score, class_id });
    }
    dets
}

/// Intersection over union of two half-open boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Class-agnostic greedy non-maximum suppression.
///
/// Detections are visited by descending score (equal scores keep their input
/// order); a detection survives iff its IoU with every survivor so far is
/// below `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}
