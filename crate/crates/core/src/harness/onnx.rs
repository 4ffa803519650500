//! Exported graphs executed with tract.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{ArrayD, ArrayView4};
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use crate::detector::DetectorBackend;
use crate::error::{Error, Result};
use crate::harness::metadata::{ModelKind, ModelMetadata, TensorSpec};
use crate::segmenter::{DecoderInputs, DecoderOutput, SegmenterBackend};

/// Values substituted for dynamic decoder axes: one box prompt is two points.
const DECODER_DYNAMIC: [(&str, usize, usize); 2] = [("point_coords", 1, 2), ("point_labels", 1, 2)];

/// A loaded graph whose inputs and outputs have been checked against its
/// metadata. The plan is immutable and shared between worker sessions.
pub struct OnnxGraph {
    meta: ModelMetadata,
    path: PathBuf,
    plan: Arc<TypedRunnableModel>,
    input_order: Vec<String>,
}

impl std::fmt::Debug for OnnxGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxGraph")
            .field("path", &self.path)
            .field("inputs", &self.input_order)
            .finish()
    }
}

fn backend_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Backend(format!("{}: {e}", path.display()))
}

fn shape_conflict(path: &Path, kind: &str, spec: &TensorSpec, graph: &[Option<i64>]) -> Error {
    let shown: Vec<String> = graph
        .iter()
        .map(|d| d.map_or_else(|| "?".to_owned(), |v| v.to_string()))
        .collect();
    Error::contract(format!(
        "{}: {kind} {:?} has shape [{}] in the graph, metadata declares {:?}",
        path.display(),
        spec.name,
        shown.join(", "),
        spec.shape
    ))
}

fn shapes_agree(spec: &TensorSpec, graph: &[Option<i64>]) -> bool {
    spec.shape.len() == graph.len()
        && spec
            .shape
            .iter()
            .zip(graph)
            .all(|(want, got)| *want < 0 || got.is_none_or(|g| g == *want))
}

impl OnnxGraph {
    /// Loads `path` and verifies every declared input and output name and
    /// fixed axis against the graph.
    pub fn load(meta: ModelMetadata, path: &Path) -> Result<Self> {
        let mut model = tract_onnx::onnx()
            .model_for_path(path)
            .map_err(|e| backend_err(path, format!("cannot load graph: {e}")))?;

        let input_outlets = model.input_outlets().map_err(|e| backend_err(path, e))?.to_vec();
        let graph_inputs: Vec<String> = input_outlets.iter().map(|o| model.node(o.node).name.clone()).collect();
        for spec in &meta.inputs {
            if !graph_inputs.contains(&spec.name) {
                return Err(Error::contract(format!(
                    "{}: input {:?} declared in metadata is absent from the graph (graph inputs: {graph_inputs:?})",
                    path.display(),
                    spec.name
                )));
            }
        }
        let declared: BTreeSet<&str> = meta.inputs.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = graph_inputs.iter().find(|n| !declared.contains(n.as_str())) {
            return Err(Error::contract(format!(
                "{}: graph input {extra:?} is not declared in metadata",
                path.display()
            )));
        }

        for (ix, name) in graph_inputs.iter().enumerate() {
            let spec = meta.input(name)?;
            let fact = model.input_fact(ix).map_err(|e| backend_err(path, e))?;
            if !fact.shape.is_open() {
                let dims: Vec<Option<i64>> = fact
                    .shape
                    .dims()
                    .map(|d| d.concretize().and_then(|d| d.to_i64().ok()))
                    .collect();
                if !shapes_agree(spec, &dims) {
                    return Err(shape_conflict(path, "input", spec, &dims));
                }
            }
            let concrete: Option<Vec<usize>> = spec
                .shape
                .iter()
                .enumerate()
                .map(|(axis, d)| {
                    if *d >= 0 {
                        return Some(*d as usize);
                    }
                    DECODER_DYNAMIC
                        .iter()
                        .find(|(n, a, _)| meta.model_kind == ModelKind::SegmenterDecoder && *n == name && *a == axis)
                        .map(|(_, _, v)| *v)
                })
                .collect();
            if let Some(shape) = concrete {
                model
                    .set_input_fact(ix, InferenceFact::dt_shape(f32::datum_type(), shape))
                    .map_err(|e| backend_err(path, e))?;
            }
        }

        let output_outlets = model.output_outlets().map_err(|e| backend_err(path, e))?.to_vec();
        let output_name = |o: &OutletId| -> String {
            model
                .outlet_label(*o)
                .map(str::to_owned)
                .unwrap_or_else(|| model.node(o.node).name.clone())
        };
        let graph_outputs: Vec<String> = output_outlets.iter().map(output_name).collect();
        let mut selected = Vec::with_capacity(meta.outputs.len());
        for spec in &meta.outputs {
            let pos = graph_outputs.iter().position(|n| *n == spec.name).ok_or_else(|| {
                Error::contract(format!(
                    "{}: output {:?} declared in metadata is absent from the graph (graph outputs: {graph_outputs:?})",
                    path.display(),
                    spec.name
                ))
            })?;
            selected.push(output_outlets[pos]);
        }
        model
            .select_output_outlets(&selected)
            .map_err(|e| backend_err(path, e))?;

        let typed = model
            .into_optimized()
            .map_err(|e| backend_err(path, format!("cannot prepare graph: {e}")))?;
        for (ix, spec) in meta.outputs.iter().enumerate() {
            let fact = typed.output_fact(ix).map_err(|e| backend_err(path, e))?;
            let dims: Vec<Option<i64>> = fact.shape.iter().map(|d| d.to_i64().ok()).collect();
            if !shapes_agree(spec, &dims) {
                return Err(shape_conflict(path, "output", spec, &dims));
            }
        }
        let plan = typed.into_runnable().map_err(|e| backend_err(path, e))?;
        Ok(OnnxGraph {
            meta,
            path: path.to_owned(),
            plan,
            input_order: graph_inputs,
        })
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.meta
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Runs the graph with named inputs; outputs come back in metadata order.
    pub fn run(&self, mut feeds: Vec<(&str, ArrayD<f32>)>) -> Result<Vec<ArrayD<f32>>> {
        let mut ordered = TVec::new();
        for name in &self.input_order {
            let pos = feeds
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::contract(format!("no value supplied for graph input {name:?}")))?;
            let (_, value) = feeds.swap_remove(pos);
            self.meta.input(name)?.check(value.shape())?;
            ordered.push(Tensor::from(value).into());
        }
        let outputs = self.plan.run(ordered).map_err(|e| backend_err(&self.path, e))?;
        outputs
            .into_iter()
            .map(|v| {
                v.into_tensor()
                    .into_plain_array::<f32>()
                    .map_err(|e| backend_err(&self.path, e))
            })
            .collect()
    }
}

pub struct OnnxDetector {
    graph: Arc<OnnxGraph>,
}

impl OnnxDetector {
    pub fn new(graph: Arc<OnnxGraph>) -> Self {
        OnnxDetector { graph }
    }
}

impl DetectorBackend for OnnxDetector {
    fn metadata(&self) -> &ModelMetadata {
        self.graph.metadata()
    }

    fn infer(&mut self, _sample_id: &str, input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>> {
        let name = self.graph.metadata().inputs[0].name.clone();
        let mut out = self.graph.run(vec![(&name, input.to_owned().into_dyn())])?;
        Ok(out.remove(0))
    }
}

pub struct OnnxSegmenter {
    encoder: Arc<OnnxGraph>,
    decoder: Arc<OnnxGraph>,
}

impl OnnxSegmenter {
    pub fn new(encoder: Arc<OnnxGraph>, decoder: Arc<OnnxGraph>) -> Self {
        OnnxSegmenter { encoder, decoder }
    }
}

impl SegmenterBackend for OnnxSegmenter {
    fn encoder_metadata(&self) -> &ModelMetadata {
        self.encoder.metadata()
    }

    fn decoder_metadata(&self) -> &ModelMetadata {
        self.decoder.metadata()
    }

    fn encode(&mut self, _sample_id: &str, input: ArrayView4<'_, f32>) -> Result<ArrayD<f32>> {
        let name = self.encoder.metadata().inputs[0].name.clone();
        let mut out = self.encoder.run(vec![(&name, input.to_owned().into_dyn())])?;
        Ok(out.remove(0))
    }

    fn decode(&mut self, inputs: &DecoderInputs<'_>) -> Result<DecoderOutput> {
        let feeds = vec![
            ("image_embeddings", inputs.image_embeddings.clone()),
            ("point_coords", inputs.point_coords.clone().into_dyn()),
            ("point_labels", inputs.point_labels.clone().into_dyn()),
            ("mask_input", inputs.mask_input.clone().into_dyn()),
            ("has_mask_input", ArrayD::from_elem(vec![1], inputs.has_mask_input)),
            ("orig_im_size", ndarray::arr1(&inputs.orig_im_size).into_dyn()),
        ];
        let outputs = self.decoder.run(feeds)?;
        let meta = self.decoder.metadata();
        let mut named: std::collections::BTreeMap<&str, ArrayD<f32>> =
            meta.outputs.iter().map(|s| s.name.as_str()).zip(outputs).collect();
        let mut take = |want: &str| -> Result<ArrayD<f32>> {
            named
                .remove(want)
                .ok_or_else(|| Error::contract(format!("decoder produced no {want:?}")))
        };
        let masks = take("masks")?;
        let iou_predictions = take("iou_predictions")?;
        let low_res_masks = take("low_res_masks")?;
        Ok(DecoderOutput {
            masks: Some(masks),
            iou_predictions,
            low_res_masks,
        })
    }
}
