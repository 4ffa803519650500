//! Image/mask datasets: pairing, binarization, ground-truth boxes, training
//! subsets and detector label export.

mod bbox;
mod labels;
mod manifest;
mod mask;

pub use bbox::{derive_boxes, BBox, DEFAULT_MIN_AREA};
pub use labels::{export_detector_labels, label_line};
pub(crate) use manifest::write_json_line;
pub use manifest::{
    cross_reference, select_training_subset, subset_key, CrossReference, DatasetManifest, ManifestEntry, Modality,
    Split,
};
pub(crate) use mask::open_image;
pub use mask::{binarize_mask, load_mask, save_mask, BinaryMask, MASK_THRESHOLD};
