//! Detector-prompted medical image segmentation: dataset preparation,
//! letterbox geometry, detector decoding, box-prompted mask decoding,
//! overlap metrics, box-jitter studies and a reproducible evaluation harness.

pub mod dataset;
pub mod detector;
pub mod error;
pub mod harness;
pub mod jitter;
pub mod metrics;
pub mod preprocess;
pub mod segmenter;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/jitter.md")]
    mod jitter {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
