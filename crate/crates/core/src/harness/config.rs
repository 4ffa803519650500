//! Run configuration: a JSON file, optionally overridden by CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_MIN_AREA;
use crate::detector::{DEFAULT_CONF_THRESH, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::harness::metadata::Variant;
use crate::jitter::JitterSpec;
use crate::metrics::StdKind;
use crate::segmenter::{DecodeSettings, PipelineSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub n: usize,
    pub seed: u64,
}

impl Default for SubsetSpec {
    fn default() -> Self {
        SubsetSpec { n: 100, seed: 0 }
    }
}

/// Whether samples with no detections count towards summary statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPredictions {
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub mask_threshold: f64,
    pub multimask: bool,
    pub min_area: usize,
    pub jitter: JitterSpec,
    pub subset: SubsetSpec,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    /// Segmenter variants to run; empty means every variant in the bundle.
    pub variants: Vec<Variant>,
    /// Directory of externally produced masks scored as an extra model.
    pub external_masks: Option<PathBuf>,
    pub std: StdKind,
    pub empty_predictions: EmptyPredictions,
    /// Fraction of failed samples per model above which a run aborts.
    pub max_failure_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifests: Vec::new(),
            bundle: None,
            output_dir: PathBuf::from("run"),
            conf_thresh: DEFAULT_CONF_THRESH,
            nms_iou: DEFAULT_NMS_IOU,
            mask_threshold: 0.0,
            multimask: true,
            min_area: DEFAULT_MIN_AREA,
            jitter: JitterSpec::default(),
            subset: SubsetSpec::default(),
            workers: 0,
            variants: Vec::new(),
            external_masks: None,
            std: StdKind::Sample,
            empty_predictions: EmptyPredictions::Include,
            max_failure_rate: 0.1,
        }
    }
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.manifests.iter_mut().for_each(rebase);
        config.bundle.as_mut().map(rebase);
        config.external_masks.as_mut().map(rebase);
        rebase(&mut config.output_dir);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("conf_thresh", self.conf_thresh)?;
        unit("nms_iou", self.nms_iou)?;
        unit("max_failure_rate", self.max_failure_rate)?;
        if !self.mask_threshold.is_finite() {
            return Err(Error::config("mask_threshold must be finite"));
        }
        if self.subset.n == 0 {
            return Err(Error::config("subset.n must be positive"));
        }
        if self.variants.contains(&Variant::NotApplicable) {
            return Err(Error::config("\"n/a\" is not a segmenter variant"));
        }
        Ok(())
    }

    /// Checks the fields `evaluate` and `jitter` need beyond [`validate`].
    ///
    /// [`validate`]: RunConfig::validate
    pub fn require_models(&self) -> Result<&Path> {
        self.validate()?;
        if self.manifests.is_empty() {
            return Err(Error::config("no manifests configured"));
        }
        self.bundle
            .as_deref()
            .ok_or_else(|| Error::config("no model bundle configured"))
    }

    pub fn pipeline(&self) -> PipelineSettings {
        PipelineSettings {
            conf_thresh: self.conf_thresh,
            nms_iou: self.nms_iou,
            decode: self.decode(),
        }
    }

    pub fn decode(&self) -> DecodeSettings {
        DecodeSettings {
            mask_threshold: self.mask_threshold,
            multimask: self.multimask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.jitter.offsets(), &[0, 5, 10, 15, 20]);
    }

    #[test]
    fn typo_is_an_error() {
        let err = serde_json::from_str::<RunConfig>(r#"{"conf_thres": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("conf_thres"));
    }

    #[test]
    fn ranges_checked() {
        for bad in [
            RunConfig {
                conf_thresh: 1.5,
                ..RunConfig::default()
            },
            RunConfig {
                nms_iou: -0.1,
                ..RunConfig::default()
            },
            RunConfig {
                mask_threshold: f64::NAN,
                ..RunConfig::default()
            },
            RunConfig {
                subset: SubsetSpec { n: 0, seed: 1 },
                ..RunConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"manifests": ["data/m.jsonl"], "bundle": "/abs/bundle.json", "output_dir": "out",
                "jitter": [0, 4], "subset": {"n": 10, "seed": 3}, "variants": ["high_quality"]}"#,
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.manifests, [dir.path().join("data/m.jsonl")]);
        assert_eq!(c.bundle.as_deref(), Some(Path::new("/abs/bundle.json")));
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.jitter.offsets(), &[0, 4]);
        assert_eq!(c.variants, [Variant::HighQuality]);
    }

    #[test]
    fn bad_jitter_offsets_rejected_at_parse() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"jitter": [5, 10]}"#).is_err());
    }
}
