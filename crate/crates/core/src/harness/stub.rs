//! In-process backends that stand in for exported graphs, so the whole
//! pipeline can run without model weights.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array, ArrayD, ArrayView4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_boxes, BinaryMask, DEFAULT_MIN_AREA};
use crate::detector::DetectorBackend;
use crate::error::{Error, Result};
use crate::harness::metadata::{ModelKind, ModelMetadata, OutputLayout, TensorSpec, Variant};
use crate::preprocess::{map_box, Direction, LetterboxTransform, NormalizationSpec, Placement, Preprocessing};
use crate::segmenter::{DecoderInputs, DecoderOutput, SegmenterBackend};

/// Ground-truth masks by sample id, the side channel oracle stubs read.
pub type GtIndex = BTreeMap<String, BinaryMask>;

/// Predicted-IoU scores every stub decoder reports; candidate 1 wins.
pub const STUB_IOU: [f32; 3] = [0.5, 0.9, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubKind {
    /// Detector emits the ground-truth component boxes with score 1; the
    /// segmenter's logits are positive exactly inside the prompt box.
    OracleBoxInterior,
    /// Detector as above; the segmenter returns the ground-truth mask for
    /// any prompt.
    GtPassthrough,
    /// Detector emits nothing.
    Empty,
}

impl FromStr for StubKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle_box_interior" => Ok(StubKind::OracleBoxInterior),
            "gt_passthrough" => Ok(StubKind::GtPassthrough),
            "empty" => Ok(StubKind::Empty),
            _ => Err(Error::config(format!("unknown stub kind {s:?}"))),
        }
    }
}

/// Graph geometry the stubs pretend to have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubGeometry {
    #[serde(default = "default_detector_size")]
    pub detector_input_size: usize,
    #[serde(default = "default_anchors")]
    pub detector_anchors: usize,
    #[serde(default = "default_encoder_size")]
    pub encoder_input_size: usize,
}

fn default_detector_size() -> usize {
    640
}
fn default_anchors() -> usize {
    100
}
fn default_encoder_size() -> usize {
    1024
}

impl Default for StubGeometry {
    fn default() -> Self {
        StubGeometry {
            detector_input_size: default_detector_size(),
            detector_anchors: default_anchors(),
            encoder_input_size: default_encoder_size(),
        }
    }
}

pub fn stub_detector_metadata(geometry: &StubGeometry) -> ModelMetadata {
    let s = geometry.detector_input_size as i64;
    ModelMetadata {
        model_kind: ModelKind::Detector,
        variant: Variant::NotApplicable,
        graph_path: "stub:detector".into(),
        inputs: vec![TensorSpec::new("images", &[1, 3, s, s])],
        outputs: vec![TensorSpec::new("output0", &[1, 5, geometry.detector_anchors as i64])],
        layout: Some(OutputLayout::CxcywhScores),
        preprocessing: Some(Preprocessing {
            input_size: geometry.detector_input_size,
            normalization: NormalizationSpec::unit(),
            pad_fill: 114,
        }),
    }
}

pub fn stub_segmenter_metadata(variant: Variant, geometry: &StubGeometry) -> (ModelMetadata, ModelMetadata) {
    let s = geometry.encoder_input_size as i64;
    let encoder = ModelMetadata {
        model_kind: ModelKind::SegmenterEncoder,
        variant,
        graph_path: format!("stub:seg_{variant}_encoder").into(),
        inputs: vec![TensorSpec::new("image", &[1, 3, s, s])],
        outputs: vec![TensorSpec::new("image_embeddings", &[1, 256, 64, 64])],
        layout: None,
        preprocessing: Some(Preprocessing {
            input_size: geometry.encoder_input_size,
            normalization: NormalizationSpec {
                mean: vec![123.675, 116.28, 103.53],
                std: vec![58.395, 57.12, 57.375],
                scale_to_unit: false,
            },
            pad_fill: 0,
        }),
    };
    let decoder = ModelMetadata {
        model_kind: ModelKind::SegmenterDecoder,
        variant,
        graph_path: format!("stub:seg_{variant}_decoder").into(),
        inputs: vec![
            TensorSpec::new("image_embeddings", &[1, 256, 64, 64]),
            TensorSpec::new("point_coords", &[1, -1, 2]),
            TensorSpec::new("point_labels", &[1, -1]),
            TensorSpec::new("mask_input", &[1, 1, 256, 256]),
            TensorSpec::new("has_mask_input", &[1]),
            TensorSpec::new("orig_im_size", &[2]),
        ],
        outputs: vec![
            TensorSpec::new("masks", &[1, -1, -1, -1]),
            TensorSpec::new("iou_predictions", &[1, -1]),
            TensorSpec::new("low_res_masks", &[1, -1, 256, 256]),
        ],
        layout: None,
        preprocessing: None,
    };
    (encoder, decoder)
}

fn lookup<'a>(gt: &'a Option<Arc<GtIndex>>, sample_id: &str) -> Result<&'a BinaryMask> {
    gt.as_ref()
        .and_then(|index| index.get(sample_id))
        .ok_or_else(|| Error::Backend(format!("stub has no ground truth for sample {sample_id:?}")))
}

pub struct StubDetector {
    kind: StubKind,
    meta: ModelMetadata,
    gt: Option<Arc<GtIndex>>,
    min_area: usize,
}

impl StubDetector {
    pub fn new(kind: StubKind, geometry: &StubGeometry, gt: Option<Arc<GtIndex>>, min_area: usize) -> Self {
        StubDetector {
            kind,
            meta: stub_detector_metadata(geometry),
            gt,
            min_area,
        }
    }
}

impl DetectorBackend for StubDetector {
    fn metadata(&self) -> &ModelMetadata {
        &self.meta
    }

    fn infer(&mut self, sample_id: &str, input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>> {
        let (_, anchors) = self.meta.detector_output_dims()?;
        let size = self.meta.preprocessing()?.input_size;
        debug_assert_eq!(input.shape(), &[1, 3, size, size]);
        let mut out = Array::zeros(IxDyn(&[1, 5, anchors]));
        if self.kind == StubKind::Empty {
            return Ok(out);
        }
        let gt = lookup(&self.gt, sample_id)?;
        let t = LetterboxTransform::new(gt.width(), gt.height(), size, Placement::Center)?;
        for (col, bbox) in derive_boxes(gt, self.min_area).iter().take(anchors).enumerate() {
            let b = map_box(bbox, &t, Direction::Forward)?;
            let (cx, cy) = b.center();
            for (row, v) in [cx, cy, b.width(), b.height(), 1.0].into_iter().enumerate() {
                out[[0, row, col]] = v as f32;
            }
        }
        Ok(out)
    }
}

pub struct StubSegmenter {
    kind: StubKind,
    encoder: ModelMetadata,
    decoder: ModelMetadata,
    gt: Option<Arc<GtIndex>>,
}

impl StubSegmenter {
    pub fn new(kind: StubKind, variant: Variant, gt: Option<Arc<GtIndex>>) -> Self {
        StubSegmenter::with_geometry(kind, variant, &StubGeometry::default(), gt)
    }

    pub fn with_geometry(kind: StubKind, variant: Variant, geometry: &StubGeometry, gt: Option<Arc<GtIndex>>) -> Self {
        let (encoder, decoder) = stub_segmenter_metadata(variant, geometry);
        StubSegmenter {
            kind,
            encoder,
            decoder,
            gt,
        }
    }

    /// Signed distance (in low-res cells) from each cell center to the
    /// prompt box edge, positive inside. Bilinear upscaling of this field
    /// keeps its zero crossing on the box edges, so the thresholded mask is
    /// the set of original pixels whose centers lie in the box (exact
    /// whenever one original pixel spans at least a few low-res cells).
    fn box_logits(&self, inputs: &DecoderInputs<'_>) -> Result<ArrayD<f32>> {
        let (low_h, low_w) = self.decoder.low_res_size()?;
        let size = self.encoder.preprocessing()?.input_size as f32;
        let pc = &inputs.point_coords;
        let (x0, y0, x1, y1) = (pc[[0, 0, 0]], pc[[0, 0, 1]], pc[[0, 1, 0]], pc[[0, 1, 1]]);
        let (cell_x, cell_y) = (size / low_w as f32, size / low_h as f32);
        let k = STUB_IOU.len();
        Ok(Array::from_shape_fn(IxDyn(&[1, k, low_h, low_w]), |ix| {
            let u = (ix[3] as f32 + 0.5) * cell_x;
            let v = (ix[2] as f32 + 0.5) * cell_y;
            ((u - x0) / cell_x)
                .min((x1 - u) / cell_x)
                .min((v - y0) / cell_y)
                .min((y1 - v) / cell_y)
        }))
    }
}

impl SegmenterBackend for StubSegmenter {
    fn encoder_metadata(&self) -> &ModelMetadata {
        &self.encoder
    }

    fn decoder_metadata(&self) -> &ModelMetadata {
        &self.decoder
    }

    fn encode(&mut self, _sample_id: &str, _input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>> {
        let shape: Vec<usize> = self.encoder.outputs[0].shape.iter().map(|d| *d as usize).collect();
        Ok(ArrayD::zeros(IxDyn(&shape)))
    }

    fn decode(&mut self, inputs: &DecoderInputs<'_>) -> Result<DecoderOutput> {
        let (low_h, low_w) = self.decoder.low_res_size()?;
        let k = STUB_IOU.len();
        let iou_predictions = Array::from_shape_vec(IxDyn(&[1, k]), STUB_IOU.to_vec()).expect("1 x K");
        match self.kind {
            StubKind::OracleBoxInterior => Ok(DecoderOutput {
                masks: None,
                iou_predictions,
                low_res_masks: self.box_logits(inputs)?,
            }),
            StubKind::Empty => Ok(DecoderOutput {
                masks: None,
                iou_predictions,
                low_res_masks: ArrayD::from_elem(IxDyn(&[1, k, low_h, low_w]), -1.0),
            }),
            StubKind::GtPassthrough => {
                let gt = lookup(&self.gt, inputs.sample_id)?;
                let (w, h) = gt.dims();
                let masks =
                    Array::from_shape_fn(IxDyn(&[1, k, h, w]), |ix| if gt.get(ix[3], ix[2]) { 1.0 } else { -1.0 });
                Ok(DecoderOutput {
                    masks: Some(masks),
                    iou_predictions,
                    low_res_masks: ArrayD::zeros(IxDyn(&[1, k, low_h, low_w])),
                })
            }
        }
    }
}

/// Detector and segmenter stubs of one kind sharing a ground-truth index.
pub fn stub_backends(kind: StubKind, gt: Option<Arc<GtIndex>>) -> (StubDetector, StubSegmenter) {
    let geometry = StubGeometry::default();
    (
        StubDetector::new(kind, &geometry, gt.clone(), DEFAULT_MIN_AREA),
        StubSegmenter::with_geometry(kind, Variant::Standard, &geometry, gt),
    )
}
