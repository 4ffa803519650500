//! Box-prompted mask decoding over an exported promptable segmenter.
//!
//! An image is encoded once into an [`ImageEmbedding`]; every box prompt on
//! that image reuses it. The decoder returns `K` candidate masks with
//! predicted IoU scores; the highest-scoring candidate is upscaled back to
//! the original image and thresholded.

use std::collections::VecDeque;
use std::sync::Arc;

use image::DynamicImage;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, BinaryMask};
use crate::detector::{decode_detections, nms, run_detector, Detection, DetectorBackend};
use crate::error::{Error, Result};
use crate::harness::metadata::ModelMetadata;
use crate::preprocess::{encoder_input, map_box, Direction, LetterboxTransform};

/// Cached embeddings kept per segmenter session.
pub const DEFAULT_CACHE_CAPACITY: usize = 4;

/// Immutable image embedding plus the transform into encoder-input space.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub tensor: Arc<ArrayD<f32>>,
    pub sample_id: String,
    pub transform: LetterboxTransform,
}

/// A box encoded as a labeled corner pair in encoder-input pixels:
/// top-left carries label 2, bottom-right label 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrompt {
    pub point_coords: [[f32; 2]; 2],
    pub point_labels: [f32; 2],
}

impl BoxPrompt {
    pub const LABELS: [f32; 2] = [2.0, 3.0];

    pub fn corners(&self) -> BBox {
        let [[x0, y0], [x1, y1]] = self.point_coords;
        BBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        }
    }
}

/// Tensors handed to the decoder graph, named as in the exported contract.
#[derive(Debug)]
pub struct DecoderInputs<'a> {
    pub sample_id: &'a str,
    pub image_embeddings: &'a ArrayD<f32>,
    /// `1 x P x 2`
    pub point_coords: Array3<f32>,
    /// `1 x P`
    pub point_labels: Array2<f32>,
    /// `1 x 1 x H x W`, all zero
    pub mask_input: Array4<f32>,
    pub has_mask_input: f32,
    /// `(height, width)` of the original image
    pub orig_im_size: [f32; 2],
}

/// Decoder graph outputs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `1 x K x H x W` logits already at original size, when the graph
    /// performs its own upscaling.
    pub masks: Option<ArrayD<f32>>,
    /// `1 x K`
    pub iou_predictions: ArrayD<f32>,
    /// `1 x K x h x w`
    pub low_res_masks: ArrayD<f32>,
}

/// A loaded encoder/decoder pair for one segmenter variant. Sessions are
/// single-caller.
pub trait SegmenterBackend: Send {
    fn encoder_metadata(&self) -> &ModelMetadata;
    fn decoder_metadata(&self) -> &ModelMetadata;

    /// Encodes a preprocessed `1 x 3 x S x S` tensor.
    fn encode(&mut self, sample_id: &str, input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>>;

    fn decode(&mut self, inputs: &DecoderInputs<'_>) -> Result<DecoderOutput>;
}

#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// `1 x K x h x w`
    pub low_res_logits: Array4<f32>,
    pub predicted_iou: Vec<f32>,
    pub final_mask: BinaryMask,
    pub chosen_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    /// Logit threshold; a pixel is foreground iff its logit is strictly
    /// greater.
    pub mask_threshold: f64,
    /// Pick the candidate with the highest predicted IoU; otherwise always
    /// candidate 0.
    pub multimask: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            mask_threshold: 0.0,
            multimask: true,
        }
    }
}

/// Small FIFO of recent embeddings keyed by sample id.
#[derive(Debug)]
pub struct EmbeddingCache {
    capacity: usize,
    entries: VecDeque<Arc<ImageEmbedding>>,
    encoder_calls: usize,
}

impl Default for EmbeddingCache {
    fn default() -> Self {
        EmbeddingCache::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl EmbeddingCache {
    pub fn new(capacity: usize) -> Self {
        EmbeddingCache {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
            encoder_calls: 0,
        }
    }

    pub fn get(&self, sample_id: &str) -> Option<Arc<ImageEmbedding>> {
        self.entries.iter().find(|e| e.sample_id == sample_id).cloned()
    }

    fn insert(&mut self, emb: Arc<ImageEmbedding>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(emb);
    }

    /// Number of times the encoder actually ran.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls
    }
}

/// Encodes `image`, or returns the cached embedding for `sample_id`.
pub fn encode_image(
    backend: &mut dyn SegmenterBackend,
    cache: &mut EmbeddingCache,
    sample_id: &str,
    image: &DynamicImage,
) -> Result<Arc<ImageEmbedding>> {
    if let Some(hit) = cache.get(sample_id) {
        return Ok(hit);
    }
    let meta = backend.encoder_metadata();
    let out_spec = meta.outputs[0].clone();
    let (input, transform) = encoder_input(image, meta.preprocessing()?)?;
    let tensor = backend.encode(sample_id, input.view())?;
    out_spec.check(tensor.shape())?;
    cache.encoder_calls += 1;
    let emb = Arc::new(ImageEmbedding {
        tensor: Arc::new(tensor),
        sample_id: sample_id.to_owned(),
        transform,
    });
    cache.insert(emb.clone());
    Ok(emb)
}

/// Maps a box in original coordinates into a labeled corner-pair prompt.
pub fn box_to_prompt(bbox: &BBox, t: &LetterboxTransform) -> Result<BoxPrompt> {
    let mapped = map_box(bbox, t, Direction::Forward)?;
    if mapped.width() < 1.0 || mapped.height() < 1.0 {
        return Err(Error::data(format!("prompt box degenerate after mapping: {mapped:?}")));
    }
    let size = t.dst as f64;
    let clip = |v: f64| v.clamp(0.0, size) as f32;
    Ok(BoxPrompt {
        point_coords: [[clip(mapped.x0), clip(mapped.y0)], [clip(mapped.x1), clip(mapped.y1)]],
        point_labels: BoxPrompt::LABELS,
    })
}

/// Index of the largest score; the first one wins ties.
pub fn choose_mask_index(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Runs the decoder for one prompt and reduces its candidates to a single
/// binary mask of `orig_size = (width, height)`.
pub fn decode_mask(
    backend: &mut dyn SegmenterBackend,
    emb: &ImageEmbedding,
    prompt: &BoxPrompt,
    orig_size: (usize, usize),
    settings: &DecodeSettings,
) -> Result<MaskPrediction> {
    let meta = backend.decoder_metadata();
    let (low_h, low_w) = meta.low_res_size()?;
    meta.input("image_embeddings")?.check(emb.tensor.shape())?;
    let (width, height) = orig_size;
    if (width, height) != (emb.transform.src_w, emb.transform.src_h) {
        return Err(Error::data(format!(
            "embedding of {:?} was made for a {}x{} image, not {width}x{height}",
            emb.sample_id, emb.transform.src_w, emb.transform.src_h
        )));
    }
    let inputs = DecoderInputs {
        sample_id: &emb.sample_id,
        image_embeddings: &emb.tensor,
        point_coords: Array3::from_shape_fn((1, 2, 2), |(_, p, c)| prompt.point_coords[p][c]),
        point_labels: Array2::from_shape_fn((1, 2), |(_, p)| prompt.point_labels[p]),
        mask_input: Array4::zeros((1, 1, low_h, low_w)),
        has_mask_input: 0.0,
        orig_im_size: [height as f32, width as f32],
    };
    let out = backend.decode(&inputs)?;
    let meta = backend.decoder_metadata();

    meta.output("low_res_masks")?.check(out.low_res_masks.shape())?;
    meta.output("iou_predictions")?.check(out.iou_predictions.shape())?;
    let low = out
        .low_res_masks
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::contract(format!("low_res_masks: {e}")))?;
    let iou = out
        .iou_predictions
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::contract(format!("iou_predictions: {e}")))?;
    let k = low.shape()[1];
    if k == 0 || iou.shape() != [1, k] {
        return Err(Error::contract(format!(
            "decoder returned {k} masks but iou_predictions of shape {:?}",
            iou.shape()
        )));
    }
    let predicted_iou: Vec<f32> = iou.row(0).to_vec();
    let chosen_index = if settings.multimask {
        choose_mask_index(&predicted_iou)
    } else {
        0
    };

    let full_res = out.masks.filter(|m| m.shape() == [1, k, height, width]);
    let logits = match &full_res {
        Some(m) => m
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), chosen_index)
            .into_dimensionality::<Ix2>()
            .expect("shape checked above")
            .to_owned(),
        None => upscale_logits(
            low.index_axis(Axis(0), 0).index_axis(Axis(0), chosen_index),
            &emb.transform,
        ),
    };
    let threshold = settings.mask_threshold;
    let final_mask = BinaryMask::from_fn(width, height, |x, y| logits[[y, x]] as f64 > threshold);
    Ok(MaskPrediction {
        low_res_logits: low,
        predicted_iou,
        final_mask,
        chosen_index,
    })
}

/// One output sample of a 1-D bilinear resize: up to two (source index,
/// weight) taps.
type Taps = Vec<(usize, f32)>;

/// Bilinear resize weights from `src` to `dst` samples with half-pixel
/// centers (`align_corners = false`), clamping at the low edge.
fn resize_taps(src: usize, dst: usize) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = (pos - i0 as f64) as f32;
            if i1 == i0 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Taps for `low -> input_size` resize, crop to `content`, `content -> orig`
/// resize, composed into one low-res-to-original map.
fn composite_taps(low: usize, input_size: usize, content: usize, orig: usize) -> Vec<Taps> {
    let up = resize_taps(low, input_size);
    resize_taps(content, orig)
        .into_iter()
        .map(|outer| {
            let mut taps: Taps = Vec::with_capacity(4);
            for (mid, w_outer) in outer {
                for &(src, w_inner) in &up[mid] {
                    match taps.iter_mut().find(|(s, _)| *s == src) {
                        Some(t) => t.1 += w_outer * w_inner,
                        None => taps.push((src, w_outer * w_inner)),
                    }
                }
            }
            taps
        })
        .collect()
}

/// Upscales one low-resolution logit map to the original image size:
/// bilinear to the encoder input size, crop away the bottom/right padding,
/// then bilinear to `(src_h, src_w)`. Returns a `height x width` array.
pub fn upscale_logits(low: ArrayView2<'_, f32>, t: &LetterboxTransform) -> Array2<f32> {
    let (low_h, low_w) = low.dim();
    let (content_w, content_h) = t.content_size();
    let cols = composite_taps(low_w, t.dst, content_w, t.src_w);
    let rows = composite_taps(low_h, t.dst, content_h, t.src_h);

    let mut horizontal = Array2::<f32>::zeros((low_h, t.src_w));
    for r in 0..low_h {
        for (x, taps) in cols.iter().enumerate() {
            horizontal[[r, x]] = taps.iter().map(|(c, w)| low[[r, *c]] * w).sum();
        }
    }
    let mut out = Array2::<f32>::zeros((t.src_h, t.src_w));
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..t.src_w {
            out[[y, x]] = taps.iter().map(|(r, w)| horizontal[[*r, x]] * w).sum();
        }
    }
    out
}

/// Pixelwise OR of equally sized masks; an empty list yields a blank mask of
/// `dims = (width, height)`.
pub fn union_masks(masks: &[BinaryMask], dims: (usize, usize)) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(dims.0, dims.1);
    for m in masks {
        out.union_with(m)?;
    }
    Ok(out)
}

/// Thresholds shared by detection and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub decode: DecodeSettings,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            conf_thresh: crate::detector::DEFAULT_CONF_THRESH,
            nms_iou: crate::detector::DEFAULT_NMS_IOU,
            decode: DecodeSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub detections: Vec<Detection>,
}

/// Segments every prompt box on an already-encoded image and unions the
/// results.
pub fn segment_boxes(
    seg: &mut dyn SegmenterBackend,
    emb: &ImageEmbedding,
    boxes: &[BBox],
    orig_size: (usize, usize),
    settings: &DecodeSettings,
) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(orig_size.0, orig_size.1);
    for bbox in boxes {
        let prompt = box_to_prompt(bbox, &emb.transform)?;
        let pred = decode_mask(seg, emb, &prompt, orig_size, settings)?;
        out.union_with(&pred.final_mask)?;
    }
    Ok(out)
}

/// Full chain for one image: detect, decode, suppress, prompt the segmenter
/// once per surviving box, union. No detections yield a blank mask.
pub fn segment_image(
    det: &mut dyn DetectorBackend,
    seg: &mut dyn SegmenterBackend,
    cache: &mut EmbeddingCache,
    sample_id: &str,
    image: &DynamicImage,
    settings: &PipelineSettings,
) -> Result<Segmentation> {
    let orig_size = (image.width() as usize, image.height() as usize);
    let (raw, t) = run_detector(det, sample_id, image)?;
    let detections = nms(&decode_detections(&raw, &t, settings.conf_thresh), settings.nms_iou);
    if detections.is_empty() {
        return Ok(Segmentation {
            mask: BinaryMask::empty(orig_size.0, orig_size.1),
            detections,
        });
    }
    let emb = encode_image(seg, cache, sample_id, image)?;
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let mask = segment_boxes(seg, &emb, &boxes, orig_size, &settings.decode)?;
    Ok(Segmentation { mask, detections })
}
