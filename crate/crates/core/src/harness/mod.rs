//! Model bundles, backends, the evaluation and jitter drivers, and reports.

pub mod bundle;
pub mod config;
pub mod metadata;
#[cfg(feature = "onnx")]
pub mod onnx;
pub mod plot;
pub mod report;
pub mod run;
pub mod stub;
pub mod study;

pub use bundle::{load_bundle, ModelBundle};
pub use config::RunConfig;
pub use report::report;
pub use run::{evaluate, SampleRecord};
pub use study::run_study;
