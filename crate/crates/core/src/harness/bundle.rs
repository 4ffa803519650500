//! `bundle.json`: the set of exported graphs (or stubs) an evaluation runs.
//!
//! ```json
//! {"kind": "onnx",
//!  "detector": { ...ModelMetadata... },
//!  "segmenters": {"standard": {"encoder": {...}, "decoder": {...}},
//!                 "high_quality": {"encoder": {...}, "decoder": {...}}}}
//! ```
//!
//! or, for model-free runs,
//!
//! ```json
//! {"kind": "stub", "stub": "oracle_box_interior", "variants": ["standard", "high_quality"]}
//! ```
//!
//! Graph paths are resolved relative to the bundle file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorBackend;
use crate::error::{Error, Result};
use crate::harness::metadata::{ModelKind, ModelMetadata, Variant};
use crate::harness::stub::{
    stub_detector_metadata, stub_segmenter_metadata, GtIndex, StubDetector, StubGeometry, StubKind, StubSegmenter,
};
use crate::segmenter::SegmenterBackend;

#[cfg(feature = "onnx")]
use crate::harness::onnx::{OnnxDetector, OnnxGraph, OnnxSegmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterFiles {
    pub encoder: ModelMetadata,
    pub decoder: ModelMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnnxBundleFile {
    pub detector: ModelMetadata,
    pub segmenters: BTreeMap<Variant, SegmenterFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubBundleFile {
    pub stub: StubKind,
    #[serde(default = "default_stub_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub geometry: StubGeometry,
}

fn default_stub_variants() -> Vec<Variant> {
    vec![Variant::Standard, Variant::HighQuality]
}

/// On-disk form of `bundle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BundleFile {
    Onnx(OnnxBundleFile),
    Stub(StubBundleFile),
}

impl BundleFile {
    /// Checks everything that can be checked without opening graphs.
    pub fn validate(&self) -> Result<()> {
        match self {
            BundleFile::Onnx(b) => {
                check_slot(&b.detector, ModelKind::Detector, Variant::NotApplicable)?;
                if b.segmenters.is_empty() {
                    return Err(Error::contract("bundle declares no segmenter variant"));
                }
                for (variant, files) in &b.segmenters {
                    check_slot(&files.encoder, ModelKind::SegmenterEncoder, *variant)?;
                    check_slot(&files.decoder, ModelKind::SegmenterDecoder, *variant)?;
                    let embed = &files.encoder.outputs[0];
                    let want = files.decoder.input("image_embeddings")?;
                    if embed.shape != want.shape {
                        return Err(Error::contract(format!(
                            "{variant}: encoder output {:?} is {:?} but decoder input \"image_embeddings\" is {:?}",
                            embed.name, embed.shape, want.shape
                        )));
                    }
                }
            }
            BundleFile::Stub(b) => {
                if b.variants.is_empty() {
                    return Err(Error::contract("bundle declares no segmenter variant"));
                }
                let unique: BTreeSet<_> = b.variants.iter().collect();
                if unique.len() != b.variants.len() || unique.contains(&Variant::NotApplicable) {
                    return Err(Error::contract(format!("invalid stub variants {:?}", b.variants)));
                }
            }
        }
        Ok(())
    }
}

fn check_slot(meta: &ModelMetadata, kind: ModelKind, variant: Variant) -> Result<()> {
    if meta.model_kind != kind {
        return Err(Error::contract(format!(
            "{}: expected a {kind:?} graph, metadata says {:?}",
            meta.graph_path.display(),
            meta.model_kind
        )));
    }
    if meta.variant != variant {
        return Err(Error::contract(format!(
            "{}: listed under variant {variant} but metadata says {}",
            meta.graph_path.display(),
            meta.variant
        )));
    }
    meta.validate()
}

#[cfg(feature = "onnx")]
type GraphPair = (Arc<OnnxGraph>, Arc<OnnxGraph>);

enum Loaded {
    Stub(StubBundleFile),
    #[cfg(feature = "onnx")]
    Onnx {
        detector: Arc<OnnxGraph>,
        segmenters: BTreeMap<Variant, GraphPair>,
    },
}

/// A validated bundle. Backends are cheap to create per worker: graph plans
/// are shared, sessions are not.
pub struct ModelBundle {
    path: PathBuf,
    loaded: Loaded,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("path", &self.path)
            .field("variants", &self.variants())
            .finish()
    }
}

impl ModelBundle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_stub(&self) -> bool {
        matches!(self.loaded, Loaded::Stub(_))
    }

    pub fn variants(&self) -> Vec<Variant> {
        match &self.loaded {
            Loaded::Stub(b) => b.variants.clone(),
            #[cfg(feature = "onnx")]
            Loaded::Onnx { segmenters, .. } => segmenters.keys().copied().collect(),
        }
    }

    pub fn detector_metadata(&self) -> ModelMetadata {
        match &self.loaded {
            Loaded::Stub(b) => stub_detector_metadata(&b.geometry),
            #[cfg(feature = "onnx")]
            Loaded::Onnx { detector, .. } => detector.metadata().clone(),
        }
    }

    /// `(encoder, decoder)` metadata of one variant.
    pub fn segmenter_metadata(&self, variant: Variant) -> Result<(ModelMetadata, ModelMetadata)> {
        self.check_variant(variant)?;
        match &self.loaded {
            Loaded::Stub(b) => Ok(stub_segmenter_metadata(variant, &b.geometry)),
            #[cfg(feature = "onnx")]
            Loaded::Onnx { segmenters, .. } => {
                let (e, d) = &segmenters[&variant];
                Ok((e.metadata().clone(), d.metadata().clone()))
            }
        }
    }

    fn check_variant(&self, variant: Variant) -> Result<()> {
        if self.variants().contains(&variant) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "variant {variant} is not in bundle {}",
                self.path.display()
            )))
        }
    }

    /// A fresh detector session. `gt` feeds the stub oracles and is ignored
    /// by real graphs.
    pub fn detector(&self, gt: Option<Arc<GtIndex>>, min_area: usize) -> Result<Box<dyn DetectorBackend>> {
        match &self.loaded {
            Loaded::Stub(b) => Ok(Box::new(StubDetector::new(b.stub, &b.geometry, gt, min_area))),
            #[cfg(feature = "onnx")]
            Loaded::Onnx { detector, .. } => {
                let _ = (gt, min_area);
                Ok(Box::new(OnnxDetector::new(detector.clone())))
            }
        }
    }

    pub fn segmenter(&self, variant: Variant, gt: Option<Arc<GtIndex>>) -> Result<Box<dyn SegmenterBackend>> {
        self.check_variant(variant)?;
        match &self.loaded {
            Loaded::Stub(b) => Ok(Box::new(StubSegmenter::with_geometry(b.stub, variant, &b.geometry, gt))),
            #[cfg(feature = "onnx")]
            Loaded::Onnx { segmenters, .. } => {
                let _ = gt;
                let (e, d) = &segmenters[&variant];
                Ok(Box::new(OnnxSegmenter::new(e.clone(), d.clone())))
            }
        }
    }

    /// Every file the results depend on, bundle descriptor first.
    pub fn model_files(&self) -> Vec<PathBuf> {
        let mut files = vec![self.path.clone()];
        match &self.loaded {
            Loaded::Stub(_) => {}
            #[cfg(feature = "onnx")]
            Loaded::Onnx { detector, segmenters } => {
                files.push(detector.path().to_owned());
                for (e, d) in segmenters.values() {
                    files.push(e.path().to_owned());
                    files.push(d.path().to_owned());
                }
            }
        }
        files
    }
}

/// Reads, validates and (for ONNX bundles) opens every graph of a bundle.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BundleFile = serde_json::from_str(&text)
        .map_err(|e| Error::contract(format!("{}: invalid bundle description: {e}", path.display())))?;
    file.validate()?;
    let loaded = match file {
        BundleFile::Stub(b) => Loaded::Stub(b),
        BundleFile::Onnx(b) => open_graphs(path, b)?,
    };
    log::info!("loaded bundle {}", path.display());
    Ok(ModelBundle {
        path: path.to_owned(),
        loaded,
    })
}

#[cfg(feature = "onnx")]
fn open_graphs(bundle_path: &Path, b: OnnxBundleFile) -> Result<Loaded> {
    let root = bundle_path.parent().unwrap_or(Path::new("."));
    let open = |meta: ModelMetadata| -> Result<Arc<OnnxGraph>> {
        let graph_path = root.join(&meta.graph_path);
        if !graph_path.is_file() {
            return Err(Error::data(format!("graph file {} not found", graph_path.display())));
        }
        Ok(Arc::new(OnnxGraph::load(meta, &graph_path)?))
    };
    let detector = open(b.detector)?;
    let mut segmenters = BTreeMap::new();
    for (variant, files) in b.segmenters {
        segmenters.insert(variant, (open(files.encoder)?, open(files.decoder)?));
    }
    Ok(Loaded::Onnx { detector, segmenters })
}

#[cfg(not(feature = "onnx"))]
fn open_graphs(bundle_path: &Path, _b: OnnxBundleFile) -> Result<Loaded> {
    Err(Error::config(format!(
        "{}: ONNX bundles need the `onnx` feature",
        bundle_path.display()
    )))
}

/// Hex sha256 of a file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
