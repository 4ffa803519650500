use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Preprocessing;

/// Input names of the exported promptable-mask decoder, in call order.
pub const DECODER_INPUTS: [&str; 6] = [
    "image_embeddings",
    "point_coords",
    "point_labels",
    "mask_input",
    "has_mask_input",
    "orig_im_size",
];

/// Output names of the exported promptable-mask decoder.
pub const DECODER_OUTPUTS: [&str; 3] = ["masks", "iou_predictions", "low_res_masks"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Detector,
    SegmenterEncoder,
    SegmenterDecoder,
}

/// Which segmenter weights a graph belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "high_quality")]
    HighQuality,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Variant {
    /// Model label used in records and reports for the detector + this
    /// segmenter pipeline.
    pub fn pipeline_label(self) -> &'static str {
        match self {
            Variant::Standard => "det+seg_standard",
            Variant::HighQuality => "det+seg_hq",
            Variant::NotApplicable => "det+seg",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::HighQuality => "high_quality",
            Variant::NotApplicable => "n/a",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "high_quality" | "hq" => Ok(Variant::HighQuality),
            _ => Err(Error::config(format!("unknown segmenter variant {s:?}"))),
        }
    }
}

/// Detector output layouts the decoder understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLayout {
    /// `1 x (4 + C) x N`: rows 0..4 are `cx, cy, w, h` in letterboxed
    /// pixels, rows 4.. are per-class scores.
    CxcywhScores,
}

/// Name and shape of one graph input or output. `-1` marks a dynamic axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<i64>,
}

impl TensorSpec {
    pub fn new(name: &str, shape: &[i64]) -> Self {
        TensorSpec {
            name: name.to_owned(),
            shape: shape.to_vec(),
        }
    }

    /// True when `dims` agrees with every fixed axis of the declared shape.
    pub fn matches(&self, dims: &[usize]) -> bool {
        dims.len() == self.shape.len()
            && self
                .shape
                .iter()
                .zip(dims)
                .all(|(want, got)| *want < 0 || *want as usize == *got)
    }

    pub fn check(&self, dims: &[usize]) -> Result<()> {
        if self.matches(dims) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "tensor {:?} has shape {dims:?}, metadata declares {:?}",
                self.name, self.shape
            )))
        }
    }

    fn fixed(&self, axis: usize) -> Option<usize> {
        self.shape.get(axis).and_then(|d| (*d >= 0).then_some(*d as usize))
    }
}

/// Contract between an exported graph and the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub model_kind: ModelKind,
    pub variant: Variant,
    pub graph_path: PathBuf,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<OutputLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<Preprocessing>,
}

impl ModelMetadata {
    pub fn input(&self, name: &str) -> Result<&TensorSpec> {
        find(&self.inputs, name, "input", &self.graph_path)
    }

    pub fn output(&self, name: &str) -> Result<&TensorSpec> {
        find(&self.outputs, name, "output", &self.graph_path)
    }

    pub fn preprocessing(&self) -> Result<&Preprocessing> {
        self.preprocessing
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{}: preprocessing block missing", self.graph_path.display())))
    }

    /// Detector output geometry `(classes, anchors)`.
    pub fn detector_output_dims(&self) -> Result<(usize, usize)> {
        let out = &self.outputs[0];
        match (out.fixed(1), out.fixed(2)) {
            (Some(rows), Some(n)) if rows > 4 => Ok((rows - 4, n)),
            _ => Err(Error::contract(format!(
                "detector output {:?} must be 1x(4+C)xN with fixed C >= 1 and N, got {:?}",
                out.name, out.shape
            ))),
        }
    }

    /// Checks the internal consistency of the declared contract (no graph
    /// needed).
    pub fn validate(&self) -> Result<()> {
        let path = self.graph_path.display();
        let square_image_input = |spec: &TensorSpec, size: usize| -> Result<()> {
            let want = [1, 3, size as i64, size as i64];
            if spec.shape != want {
                return Err(Error::contract(format!(
                    "{path}: input {:?} declares {:?}, preprocessing implies {want:?}",
                    spec.name, spec.shape
                )));
            }
            Ok(())
        };
        match self.model_kind {
            ModelKind::Detector => {
                if self.variant != Variant::NotApplicable {
                    return Err(Error::contract(format!("{path}: detector variant must be \"n/a\"")));
                }
                let pre = self.preprocessing()?;
                pre.normalization.validate()?;
                if self.inputs.len() != 1 || self.outputs.len() != 1 {
                    return Err(Error::contract(format!(
                        "{path}: detector must have one input and one output"
                    )));
                }
                square_image_input(&self.inputs[0], pre.input_size)?;
                if self.layout != Some(OutputLayout::CxcywhScores) {
                    return Err(Error::contract(format!("{path}: detector output layout missing")));
                }
                if self.outputs[0].fixed(0) != Some(1) || self.outputs[0].shape.len() != 3 {
                    return Err(Error::contract(format!(
                        "{path}: detector output {:?} must be rank 3 with batch 1",
                        self.outputs[0].name
                    )));
                }
                self.detector_output_dims()?;
            }
            ModelKind::SegmenterEncoder => {
                self.check_variant()?;
                let pre = self.preprocessing()?;
                pre.normalization.validate()?;
                if self.inputs.len() != 1 || self.outputs.len() != 1 {
                    return Err(Error::contract(format!(
                        "{path}: encoder must have one input and one output"
                    )));
                }
                square_image_input(&self.inputs[0], pre.input_size)?;
                let out = &self.outputs[0];
                if out.shape.len() != 4 || out.shape.iter().any(|d| *d <= 0) || out.shape[0] != 1 {
                    return Err(Error::contract(format!(
                        "{path}: encoder output {:?} must be a fixed 1xCxHxW shape, got {:?}",
                        out.name, out.shape
                    )));
                }
            }
            ModelKind::SegmenterDecoder => {
                self.check_variant()?;
                for name in DECODER_INPUTS {
                    self.input(name)?;
                }
                for name in DECODER_OUTPUTS {
                    self.output(name)?;
                }
                let low = self.output("low_res_masks")?;
                if low.shape.len() != 4 || low.fixed(2).is_none() || low.fixed(3).is_none() {
                    return Err(Error::contract(format!(
                        "{path}: low_res_masks must be 1xKxHxW with fixed H, W, got {:?}",
                        low.shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size of the decoder's low-resolution mask output.
    pub fn low_res_size(&self) -> Result<(usize, usize)> {
        let low = self.output("low_res_masks")?;
        match (low.fixed(2), low.fixed(3)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::contract("low_res_masks spatial size must be fixed")),
        }
    }

    fn check_variant(&self) -> Result<()> {
        if self.variant == Variant::NotApplicable {
            return Err(Error::contract(format!(
                "{}: segmenter graphs need a variant",
                self.graph_path.display()
            )));
        }
        Ok(())
    }
}

fn find<'a>(specs: &'a [TensorSpec], name: &str, what: &str, path: &std::path::Path) -> Result<&'a TensorSpec> {
    specs.iter().find(|s| s.name == name).ok_or_else(|| {
        Error::contract(format!(
            "{}: metadata declares no {what} named {name:?}",
            path.display()
        ))
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_json_names() {
        assert_eq!(serde_json::to_string(&Variant::NotApplicable).unwrap(), "\"n/a\"");
        assert_eq!(
            serde_json::to_string(&Variant::HighQuality).unwrap(),
            "\"high_quality\""
        );
    }

    #[test]
    fn dynamic_axes_match_anything() {
        let spec = TensorSpec::new("point_coords", &[1, -1, 2]);
        assert!(spec.matches(&[1, 7, 2]));
        assert!(!spec.matches(&[1, 7, 3]));
        assert!(!spec.matches(&[1, 7]));
    }

    #[test]
    fn detector_metadata_validates() {
        let meta = fixtures::detector(640, 8400);
        meta.validate().unwrap();
        assert_eq!(meta.detector_output_dims().unwrap(), (1, 8400));

        let mut bad = meta.clone();
        bad.inputs[0].shape = vec![1, 3, 320, 320];
        assert!(matches!(bad.validate(), Err(Error::Contract(_))));

        let mut bad = meta;
        bad.outputs[0].shape = vec![1, 4, 8400];
        assert!(bad.validate().is_err());
    }
}
