#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use promptseg::dataset::{save_mask, BBox, BinaryMask, DatasetManifest, ManifestEntry, Modality, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// One foreground blob of random size and position in a `size x size` mask.
pub fn random_blob(rng: &mut impl Rng, size: usize, shape: Shape) -> BinaryMask {
    let w = rng.gen_range(8..=size / 2) as f64;
    let h = rng.gen_range(8..=size / 2) as f64;
    let x0 = rng.gen_range(0..=size - w as usize) as f64;
    let y0 = rng.gen_range(0..=size - h as usize) as f64;
    match shape {
        Shape::Rect => BinaryMask::from_box(size, size, &BBox::new(x0, y0, x0 + w, y0 + h).unwrap()),
        Shape::Ellipse => {
            let (cx, cy, rx, ry) = (x0 + w / 2.0, y0 + h / 2.0, w / 2.0, h / 2.0);
            BinaryMask::from_fn(size, size, |x, y| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })
        }
    }
}

/// A noisy gray image that is brighter where `mask` is set.
pub fn image_for(mask: &BinaryMask, rng: &mut impl Rng) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let base: u8 = if mask.get(x as usize, y as usize) { 180 } else { 60 };
        Luma([base.saturating_add(rng.gen_range(0..40))])
    })
}

/// Writes `n` image/mask pairs (shapes cycle through `shapes`) and an
/// all-eval manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, dataset_id: &str, n: usize, size: usize, shapes: &[Shape], seed: u64) -> PathBuf {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&masks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..n {
        let id = format!("{dataset_id}_{i:04}");
        let gt = random_blob(&mut rng, size, shapes[i % shapes.len()]);
        let image_path = images.join(format!("{id}.png"));
        let mask_path = masks.join(format!("{id}.png"));
        image_for(&gt, &mut rng).save(&image_path).unwrap();
        save_mask(&gt, &mask_path).unwrap();
        entries.push(ManifestEntry {
            sample_id: id,
            image_path,
            mask_path,
            split: Split::Eval,
        });
    }
    let path = dir.join("manifest.jsonl");
    DatasetManifest::new(dataset_id, Modality::Xray, entries)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

pub fn write_stub_bundle(dir: &Path, stub: &str) -> PathBuf {
    let path = dir.join("bundle.json");
    fs::write(&path, format!(r#"{{"kind": "stub", "stub": "{stub}"}}"#)).unwrap();
    path
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/onnx")
}

/// `bundle.json` content for the fixture graphs, one segmenter entry per
/// variant (all sharing the same graphs).
pub fn fixture_bundle_json(variants: &[&str], decoder_graph: &str) -> serde_json::Value {
    let graphs = fixture_dir();
    let graph = |name: &str| graphs.join(name).to_string_lossy().into_owned();
    let detector = serde_json::json!({
        "model_kind": "detector",
        "variant": "n/a",
        "graph_path": graph("detector.onnx"),
        "inputs": [{"name": "images", "shape": [1, 3, 64, 64]}],
        "outputs": [{"name": "output0", "shape": [1, 5, 8]}],
        "layout": "cxcywh_scores",
        "preprocessing": {
            "input_size": 64,
            "normalization": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0], "scale_to_unit": true},
            "pad_fill": 114
        }
    });
    let mut segmenters = serde_json::Map::new();
    for v in variants {
        segmenters.insert(
            v.to_string(),
            serde_json::json!({
                "encoder": {
                    "model_kind": "segmenter_encoder",
                    "variant": v,
                    "graph_path": graph("encoder.onnx"),
                    "inputs": [{"name": "image", "shape": [1, 3, 64, 64]}],
                    "outputs": [{"name": "image_embeddings", "shape": [1, 8, 16, 16]}],
                    "preprocessing": {
                        "input_size": 64,
                        "normalization": {
                            "mean": [123.675, 116.28, 103.53],
                            "std": [58.395, 57.12, 57.375],
                            "scale_to_unit": false
                        },
                        "pad_fill": 0
                    }
                },
                "decoder": {
                    "model_kind": "segmenter_decoder",
                    "variant": v,
                    "graph_path": graph(decoder_graph),
                    "inputs": [
                        {"name": "image_embeddings", "shape": [1, 8, 16, 16]},
                        {"name": "point_coords", "shape": [1, -1, 2]},
                        {"name": "point_labels", "shape": [1, -1]},
                        {"name": "mask_input", "shape": [1, 1, 16, 16]},
                        {"name": "has_mask_input", "shape": [1]},
                        {"name": "orig_im_size", "shape": [2]}
                    ],
                    "outputs": [
                        {"name": "masks", "shape": [1, -1, -1, -1]},
                        {"name": "iou_predictions", "shape": [1, -1]},
                        {"name": "low_res_masks", "shape": [1, -1, 16, 16]}
                    ]
                }
            }),
        );
    }
    serde_json::json!({"kind": "onnx", "detector": detector, "segmenters": segmenters})
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_owned()
}
